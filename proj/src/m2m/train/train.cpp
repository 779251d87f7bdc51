#include "m2m/train/train.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace m2m {

Regime parse_regime(const std::string& name) {
    if (name == "baseline") return Regime::Baseline;
    if (name == "m2m") return Regime::M2m;
    if (name == "m2m_semi") return Regime::M2mSemi;
    throw std::invalid_argument("unknown regime '" + name +
                                "' (expected baseline, m2m or m2m_semi)");
}

const char* regime_name(Regime r) {
    switch (r) {
        case Regime::Baseline: return "baseline";
        case Regime::M2m: return "m2m";
        case Regime::M2mSemi: return "m2m_semi";
    }
    return "?";
}

RegKind parse_reg_kind(const std::string& name) {
    if (name == "diffusion") return RegKind::Diffusion;
    if (name == "gradicon") return RegKind::Gradicon;
    throw std::invalid_argument("unknown regularizer '" + name +
                                "' (expected diffusion or gradicon)");
}

const char* reg_kind_name(RegKind k) {
    return k == RegKind::Diffusion ? "diffusion" : "gradicon";
}

void TrainConfig::validate() const {
    if (data_dir.empty()) throw std::invalid_argument("train config: data_dir is empty");
    if (out_dir.empty()) throw std::invalid_argument("train config: out_dir is empty");
    if (!(lambda_reg >= 0.0) || !std::isfinite(lambda_reg))
        throw std::invalid_argument("train config: lambda_reg must be finite and >= 0");
    if (!(lambda_gcc >= 0.0) || !std::isfinite(lambda_gcc))
        throw std::invalid_argument("train config: lambda_gcc must be finite and >= 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw std::invalid_argument("train config: learning_rate must be finite and > 0");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (iterations < 0) throw std::invalid_argument("train config: iterations must be >= 0");
    if (eval_interval < 1) throw std::invalid_argument("train config: eval_interval must be >= 1");
    if (!(bridge_aligned_ratio >= 0.0 && bridge_aligned_ratio <= 1.0))
        throw std::invalid_argument("train config: bridge_aligned_ratio must lie in [0, 1]");
    if (regime != Regime::M2mSemi && bridge_aligned_ratio != 0.0)
        throw std::invalid_argument(
            "train config: bridge_aligned_ratio applies to the m2m_semi regime only");
    if (regime != Regime::M2mSemi && !bridge_subjects.empty())
        throw std::invalid_argument(
            "train config: bridge_subjects apply to the m2m_semi regime only");
    if (reg_kind == RegKind::Gradicon && regime != Regime::Baseline)
        throw std::invalid_argument(
            "train config: gradicon regularization needs the baseline regime's "
            "forward/backward pair; cyclic regimes use diffusion plus the cycle penalty");
    if (metric.radius < 1) throw std::invalid_argument("train config: metric radius must be >= 1");
    if (!(metric.eps > 0.0)) throw std::invalid_argument("train config: metric eps must be > 0");
    if (backend == BackendKind::Amortized) arch.validate();
}

TrainData load_train_data(const std::string& manifest_path) {
    TrainData d;
    d.manifest = load_manifest(manifest_path);
    d.train_indices = d.manifest.split_indices("train");
    if (d.train_indices.size() < 2)
        throw std::invalid_argument("load_train_data: train split needs at least 2 subjects, " +
                                    manifest_path + " lists " +
                                    std::to_string(d.train_indices.size()));
    d.subjects.reserve(d.train_indices.size());
    for (int idx : d.train_indices)
        d.subjects.push_back(load_subject(d.manifest, d.manifest.entries[std::size_t(idx)]));
    return d;
}

namespace {

// First m entries of a seeded partial Fisher-Yates shuffle of
// {0..n-1} \ {exclude}: m distinct indices, uniform over that set.
std::vector<int> draw_distinct(Rng& rng, int n, int m, int exclude = -1) {
    std::vector<int> cand;
    cand.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i)
        if (i != exclude) cand.push_back(i);
    for (int k = 0; k < m; ++k) {
        int j = k + rng.uniform_int(int(cand.size()) - k);
        std::swap(cand[std::size_t(k)], cand[std::size_t(j)]);
    }
    cand.resize(std::size_t(m));
    return cand;
}

Grid<float> to_f32(const Grid<double>& g) {
    Grid<float> out(g.shape, g.channels);
    for (std::size_t i = 0; i < g.data.size(); ++i) out.data[i] = float(g.data[i]);
    return out;
}

}  // namespace

QuadSample sample_quad(const TrainData& data, Rng& rng, Regime regime,
                       double bridge_aligned_ratio, const std::vector<int>& bridge_pool) {
    const int n = int(data.subjects.size());
    QuadSample q;
    if (regime == Regime::Baseline) {
        if (n < 2)
            throw std::invalid_argument("sample_quad: baseline needs at least 2 train subjects, have " +
                                        std::to_string(n));
        auto ij = draw_distinct(rng, n, 2);
        q.s = ij[0];
        q.t = ij[1];
        return q;
    }
    if (n < 4)
        throw std::invalid_argument("sample_quad: regime " + std::string(regime_name(regime)) +
                                    " needs at least 4 train subjects, have " + std::to_string(n));
    for (int p : bridge_pool)
        if (p < 0 || p >= n)
            throw std::invalid_argument("sample_quad: bridge pool index " + std::to_string(p) +
                                        " outside the train roster");
    q.has_bridge = true;
    bool aligned = false;
    if (regime == Regime::M2mSemi) {
        if (!bridge_pool.empty())
            aligned = true;  // fixed-subset mode: every bridge is pre-aligned
        else
            aligned = rng.uniform() < bridge_aligned_ratio;
    }
    if (aligned) {
        int k = bridge_pool.empty() ? rng.uniform_int(n)
                                    : bridge_pool[std::size_t(rng.uniform_int(int(bridge_pool.size())))];
        auto ij = draw_distinct(rng, n, 2, k);
        q.s = ij[0];
        q.t = ij[1];
        q.sp = q.tp = k;
        q.bridge_is_aligned = true;
    } else {
        auto v = draw_distinct(rng, n, 4);
        q.s = v[0];
        q.t = v[1];
        q.sp = v[2];
        q.tp = v[3];
    }
    return q;
}

void adam_step(ModelParams& params, const NamedGrads& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
    if (!(lr > 0.0) || !std::isfinite(lr))
        throw std::invalid_argument("adam_step: learning rate must be finite and > 0");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(beta2, double(state.t));
    for (const auto& [name, g] : grads) {
        Grid<float>& p = params.kind == BackendKind::FieldBank ? bank_ref(params, name)
                                                               : params.tensor(name);
        if (p.shape != g.shape || p.channels != g.channels)
            throw std::invalid_argument("adam_step: gradient shape mismatch for '" + name + "'");
        for (float v : g.data)
            if (!std::isfinite(v))
                throw std::runtime_error("adam_step: non-finite gradient in '" + name + "'");
        auto it = state.moments.find(name);
        if (it == state.moments.end())
            it = state.moments
                     .emplace(name, std::make_pair(Grid<float>(g.shape, g.channels, 0.0f),
                                                   Grid<float>(g.shape, g.channels, 0.0f)))
                     .first;
        Grid<float>& m = it->second.first;
        Grid<float>& v = it->second.second;
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double gi = double(g.data[i]);
            const double mi = beta1 * double(m.data[i]) + (1.0 - beta1) * gi;
            const double vi = beta2 * double(v.data[i]) + (1.0 - beta2) * gi * gi;
            m.data[i] = float(mi);
            v.data[i] = float(vi);
            p.data[i] = float(double(p.data[i]) - lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
        }
    }
}

namespace {

// Everything train_step needs back from one quad's graph.
struct QuadGraph {
    std::vector<std::pair<std::string, int>> param_leaves;  // tensor name -> leaf id
    std::vector<int> sim_nodes;                             // in term-name order
    int reg = -1, gcc = -1, root = -1;
    int n_fields = 0;
};

QuadGraph build_quad_graph(Tape<float>& t, ModelParams& params, const TrainData& data,
                           const QuadSample& q, const TrainConfig& cfg) {
    QuadGraph gr;
    std::vector<int> tensor_leaves;
    if (params.kind == BackendKind::Amortized) {
        for (const auto& [name, grid] : params.tensors) {
            int id = t.leaf(grid, true);
            tensor_leaves.push_back(id);
            gr.param_leaves.emplace_back(name, id);
        }
    }
    auto image = [&](int roster_idx, bool modality_a) {
        const SubjectData& sd = data.subjects[std::size_t(roster_idx)];
        return t.leaf(to_f32(modality_a ? sd.vol_a.values : sd.vol_b.values), false);
    };
    // Field warping `src_idx`'s volume onto `dst_idx`'s grid: either the
    // network applied to the image pair, or that ordered pair's bank entry.
    auto predict = [&](int src_img, int dst_img, int src_idx, int dst_idx) {
        ++gr.n_fields;
        if (params.kind == BackendKind::Amortized)
            return build_predict(t, params.arch, tensor_leaves, src_img, dst_img);
        std::string key = pair_key(data.entry(src_idx).id, data.entry(dst_idx).id);
        if (!bank_has(params, key)) bank_register(params, key);
        int id = t.leaf(bank_get(params, key), true);
        gr.param_leaves.emplace_back(key, id);
        return id;
    };

    const int s_img = image(q.s, true);
    const int t_img = image(q.t, false);
    if (cfg.regime == Regime::Baseline) {
        const int f_st = predict(s_img, t_img, q.s, q.t);
        const int sim_st = build_sim_loss(t, t.warp_linear(s_img, f_st), t_img, cfg.metric);
        gr.sim_nodes.push_back(sim_st);
        if (cfg.reg_kind == RegKind::Gradicon) {
            const int f_ts = predict(t_img, s_img, q.t, q.s);
            gr.sim_nodes.push_back(build_sim_loss(t, t.warp_linear(t_img, f_ts), s_img, cfg.metric));
            gr.reg = build_jacobian_penalty(t, {f_st, f_ts});
        } else {
            gr.reg = build_diffusion(t, f_st);
        }
        int sim_sum = gr.sim_nodes.size() == 2 ? t.add(gr.sim_nodes[0], gr.sim_nodes[1])
                                               : gr.sim_nodes[0];
        gr.root = t.add(sim_sum, t.scalar_mul(gr.reg, cfg.lambda_reg));
        return gr;
    }

    const int sp_img = image(q.sp, true);
    const int tp_img = image(q.tp, false);
    const int f_st = predict(s_img, t_img, q.s, q.t);
    const int f_tsp = predict(t_img, sp_img, q.t, q.sp);
    const int f_sptp = q.bridge_is_aligned
                           ? t.leaf(Grid<float>(data.manifest.shape, 3, 0.0f), false)
                           : predict(sp_img, tp_img, q.sp, q.tp);
    const int f_tps = predict(tp_img, s_img, q.tp, q.s);

    M2mTermIds ids = build_m2m_terms(t, s_img, t_img, sp_img, tp_img, f_st, f_tsp, f_sptp, f_tps,
                                     cfg.metric);
    gr.sim_nodes = {ids.s_sp, ids.sp_s, ids.t_tp, ids.tp_t};
    int sim_sum = t.add(t.add(ids.s_sp, ids.sp_s), t.add(ids.t_tp, ids.tp_t));

    // Smoothness over the fields actually predicted (the pre-aligned bridge's
    // identity link neither needs nor receives regularization).
    int diff_sum = t.add(t.add(build_diffusion(t, f_st), build_diffusion(t, f_tsp)),
                         build_diffusion(t, f_tps));
    if (!q.bridge_is_aligned) diff_sum = t.add(diff_sum, build_diffusion(t, f_sptp));
    gr.reg = t.scalar_mul(diff_sum, 1.0 / gr.n_fields);

    gr.gcc = build_jacobian_penalty(t, {f_st, f_tsp, f_sptp, f_tps});
    gr.root = t.add(t.add(sim_sum, t.scalar_mul(gr.reg, cfg.lambda_reg)),
                    t.scalar_mul(gr.gcc, cfg.lambda_gcc));
    return gr;
}

std::vector<std::string> term_names(const TrainConfig& cfg) {
    if (cfg.regime != Regime::Baseline) return {"s_sp", "sp_s", "t_tp", "tp_t"};
    if (cfg.reg_kind == RegKind::Gradicon) return {"sim_st", "sim_ts"};
    return {"sim"};
}

double scalar_of(const Tape<float>& t, int node) { return double(t.value(node).data[0]); }

}  // namespace

StepResult train_step(ModelParams& params, const TrainData& data,
                      const std::vector<QuadSample>& batch, const TrainConfig& cfg,
                      AdamState& adam) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const std::vector<std::string> names = term_names(cfg);
    std::vector<double> sim_sums(names.size(), 0.0);
    double reg_sum = 0.0, gcc_sum = 0.0;
    std::map<std::string, Grid<float>> acc;
    StepResult res;
    const float inv_b = 1.0f / float(batch.size());

    for (const QuadSample& q : batch) {
        Tape<float> t;
        QuadGraph gr = build_quad_graph(t, params, data, q, cfg);
        t.forward(gr.root);

        for (std::size_t i = 0; i < gr.sim_nodes.size(); ++i) {
            double v = scalar_of(t, gr.sim_nodes[i]);
            if (!std::isfinite(v))
                throw std::runtime_error("train_step: non-finite similarity term '" + names[i] +
                                         "'");
            sim_sums[i] += v / double(batch.size());
        }
        double rv = scalar_of(t, gr.reg);
        if (!std::isfinite(rv)) throw std::runtime_error("train_step: non-finite regularization term");
        reg_sum += rv / double(batch.size());
        if (gr.gcc >= 0) {
            double gv = scalar_of(t, gr.gcc);
            if (!std::isfinite(gv)) throw std::runtime_error("train_step: non-finite cycle penalty term");
            gcc_sum += gv / double(batch.size());
            res.gcc_evaluated = true;
        }
        res.fields_predicted += gr.n_fields;

        t.backward(gr.root);
        for (const auto& [name, leaf] : gr.param_leaves) {
            const Grid<float>& gl = t.grad(leaf);
            auto it = acc.find(name);
            if (it == acc.end())
                it = acc.emplace(name, Grid<float>(gl.shape, gl.channels, 0.0f)).first;
            for (std::size_t i = 0; i < gl.data.size(); ++i)
                it->second.data[i] += gl.data[i] * inv_b;
        }
    }

    adam_step(params, NamedGrads(acc.begin(), acc.end()), adam, cfg.learning_rate);

    std::vector<std::pair<std::string, double>> sims;
    for (std::size_t i = 0; i < names.size(); ++i) sims.emplace_back(names[i], sim_sums[i]);
    res.loss = final_loss(std::move(sims), reg_sum, gcc_sum, cfg.lambda_reg,
                          res.gcc_evaluated ? cfg.lambda_gcc : 0.0);
    if (!std::isfinite(res.loss.total))
        throw std::runtime_error("train_step: non-finite total loss");
    return res;
}

namespace {

std::string step_tag(int step) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", step);
    return buf;
}

std::string fmt17(double v) {
    std::ostringstream o;
    o << std::setprecision(17) << v;
    return o.str();
}

void write_checkpoint_set(const fs::path& dir, int step, const ModelParams& params,
                          const AdamState& adam, uint64_t sampler_state,
                          std::vector<std::string>& written) {
    const std::string stem = "ckpt_" + step_tag(step);
    const fs::path model_path = dir / (stem + ".bin");
    save_checkpoint(params, model_path.string());

    std::vector<std::pair<std::string, Grid<float>>> blobs;
    for (const auto& [name, mv] : adam.moments) {
        blobs.emplace_back("m/" + name, mv.first);
        blobs.emplace_back("v/" + name, mv.second);
    }
    const fs::path opt_path = dir / (stem + ".opt");
    std::ofstream opt(opt_path, std::ios::binary);
    if (!opt) throw std::runtime_error("train: cannot write " + opt_path.string());
    write_named_grids(opt, blobs);
    if (!opt) throw std::runtime_error("train: failed writing " + opt_path.string());

    json st;
    st["step"] = step;
    st["adam_t"] = adam.t;
    st["sampler_state"] = sampler_state;
    const fs::path st_path = dir / (stem + ".state.json");
    std::ofstream sf(st_path);
    sf << st.dump(2) << "\n";
    if (!sf) throw std::runtime_error("train: failed writing " + st_path.string());
    written.push_back(model_path.string());
}

// Newest step with a complete checkpoint triple in `dir`, or -1.
int find_last_checkpoint(const fs::path& dir) {
    int best = -1;
    if (!fs::exists(dir)) return best;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string n = e.path().filename().string();
        if (n.size() != 15 || n.rfind("ckpt_", 0) != 0 || n.substr(11) != ".bin") continue;
        const std::string digits = n.substr(5, 6);
        if (digits.find_first_not_of("0123456789") != std::string::npos) continue;
        int step = std::stoi(digits);
        const std::string stem = "ckpt_" + digits;
        if (!fs::exists(dir / (stem + ".opt")) || !fs::exists(dir / (stem + ".state.json")))
            continue;
        best = std::max(best, step);
    }
    return best;
}

void load_optimizer_state(const fs::path& dir, int step, AdamState& adam, Rng& sampler) {
    const std::string stem = "ckpt_" + step_tag(step);
    const fs::path opt_path = dir / (stem + ".opt");
    std::ifstream opt(opt_path, std::ios::binary);
    if (!opt) throw std::runtime_error("train: cannot open " + opt_path.string());
    auto blobs = read_named_grids(opt, opt_path.string());
    adam.moments.clear();
    for (auto& [name, grid] : blobs) {
        if (name.rfind("m/", 0) == 0)
            adam.moments[name.substr(2)].first = std::move(grid);
        else if (name.rfind("v/", 0) == 0)
            adam.moments[name.substr(2)].second = std::move(grid);
        else
            throw std::runtime_error("train: unrecognized optimizer blob '" + name + "' in " +
                                     opt_path.string());
    }
    const fs::path st_path = dir / (stem + ".state.json");
    std::ifstream sf(st_path);
    if (!sf) throw std::runtime_error("train: cannot open " + st_path.string());
    json st = json::parse(sf);
    adam.t = st.at("adam_t").get<int64_t>();
    sampler.set_state(st.at("sampler_state").get<uint64_t>());
}

// Drops metrics rows past `keep_step` so a resumed run appends cleanly.
void truncate_csv(const fs::path& path, int keep_step, const std::string& header) {
    std::vector<std::string> kept;
    if (fs::exists(path)) {
        std::ifstream in(path);
        std::string line;
        if (std::getline(in, line)) kept.push_back(line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            int step = std::atoi(line.c_str());
            if (step <= keep_step) kept.push_back(line);
        }
    }
    if (kept.empty()) kept.push_back(header);
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : kept) out << l << "\n";
    if (!out) throw std::runtime_error("train: failed rewriting " + path.string());
}

}  // namespace

TrainReport train(const TrainConfig& cfg) {
    cfg.validate();
    const std::string kHeader =
        "step,loss_total,loss_sim,loss_reg,loss_gcc,eval_dsc,eval_negjac,eval_lncc_mm";
    TrainData data = load_train_data((fs::path(cfg.data_dir) / "manifest.json").string());
    const int min_roster = cfg.regime == Regime::Baseline ? 2 : 4;
    if (int(data.train_indices.size()) < min_roster)
        throw std::invalid_argument("train: regime " + std::string(regime_name(cfg.regime)) +
                                    " needs at least " + std::to_string(min_roster) +
                                    " train subjects, have " +
                                    std::to_string(data.train_indices.size()));

    std::vector<int> bridge_pool;
    for (const std::string& id : cfg.bridge_subjects) {
        int found = -1;
        for (std::size_t i = 0; i < data.subjects.size(); ++i)
            if (data.entry(int(i)).id == id) found = int(i);
        if (found < 0)
            throw std::invalid_argument("train: bridge subject '" + id +
                                        "' is not in the train split");
        if (std::find(bridge_pool.begin(), bridge_pool.end(), found) == bridge_pool.end())
            bridge_pool.push_back(found);
    }

    const fs::path out_dir(cfg.out_dir);
    fs::create_directories(out_dir);
    const fs::path csv_path = out_dir / "metrics.csv";

    Rng master(cfg.seed);
    const uint64_t param_seed = master.fork(1).state();
    Rng sampler = master.fork(2);
    ModelParams params = cfg.backend == BackendKind::Amortized
                             ? init_params(cfg.arch, param_seed)
                             : init_field_bank(data.manifest.shape);
    AdamState adam;
    int start_step = 0;

    TrainReport report;
    report.metrics_csv = csv_path.string();

    if (cfg.resume) {
        int last = find_last_checkpoint(out_dir);
        if (last > cfg.iterations)
            throw std::invalid_argument("train: checkpoint at step " + std::to_string(last) +
                                        " exceeds configured iterations " +
                                        std::to_string(cfg.iterations));
        if (last >= 0) {
            params = load_checkpoint((out_dir / ("ckpt_" + step_tag(last) + ".bin")).string());
            if (params.kind != cfg.backend)
                throw std::invalid_argument(
                    std::string("train: checkpoint backend ") + backend_name(params.kind) +
                    " does not match configured " + backend_name(cfg.backend));
            if (params.kind == BackendKind::Amortized &&
                (params.arch.channels != cfg.arch.channels ||
                 params.arch.in_channels != cfg.arch.in_channels))
                throw std::invalid_argument(
                    "train: checkpoint architecture does not match the configured one");
            load_optimizer_state(out_dir, last, adam, sampler);
            start_step = last;
        }
    }

    EvalConfig ecfg;
    ecfg.split = cfg.eval_split;
    ecfg.metric = cfg.metric;

    std::ofstream csv;
    MetricsRecord last_eval;
    auto write_row = [&](int step, const LossBreakdown* loss, const MetricsRecord* ev) {
        csv << step << ',';
        if (loss)
            csv << fmt17(loss->total) << ',' << fmt17(loss->sim_sum()) << ','
                << fmt17(loss->reg_term) << ',' << fmt17(loss->gcc_term) << ',';
        else
            csv << ",,,,";
        if (ev)
            csv << fmt17(ev->mean_dsc) << ',' << fmt17(ev->neg_jacobian_pct) << ','
                << fmt17(ev->lncc_mm);
        else
            csv << ",,";
        csv << '\n';
        csv.flush();
    };

    if (start_step == 0) {
        csv.open(csv_path, std::ios::trunc);
        if (!csv) throw std::runtime_error("train: cannot write " + csv_path.string());
        csv << kHeader << '\n';
        last_eval = evaluate_model(params, data.manifest, ecfg);
        last_eval.step = 0;
        write_row(0, nullptr, &last_eval);
        write_checkpoint_set(out_dir, 0, params, adam, sampler.state(), report.checkpoints);
    } else {
        truncate_csv(csv_path, start_step, kHeader);
        csv.open(csv_path, std::ios::app);
        if (!csv) throw std::runtime_error("train: cannot append to " + csv_path.string());
        if (start_step == cfg.iterations) {
            last_eval = evaluate_model(params, data.manifest, ecfg);
            last_eval.step = start_step;
        }
    }

    for (int step = start_step + 1; step <= cfg.iterations; ++step) {
        std::vector<QuadSample> batch;
        batch.reserve(std::size_t(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b)
            batch.push_back(
                sample_quad(data, sampler, cfg.regime, cfg.bridge_aligned_ratio, bridge_pool));
        StepResult res = train_step(params, data, batch, cfg, adam);
        ++report.steps_run;

        const bool eval_now = step % cfg.eval_interval == 0 || step == cfg.iterations;
        if (eval_now) {
            MetricsRecord ev = evaluate_model(params, data.manifest, ecfg);
            ev.step = step;
            ev.loss_total = res.loss.total;
            ev.loss_sim = res.loss.sim_sum();
            ev.loss_reg = res.loss.reg_term;
            ev.loss_gcc = res.loss.gcc_term;
            last_eval = ev;
            write_row(step, &res.loss, &ev);
            write_checkpoint_set(out_dir, step, params, adam, sampler.state(),
                                 report.checkpoints);
        } else {
            write_row(step, &res.loss, nullptr);
        }
    }

    report.final_eval = last_eval;
    return report;
}

}  // namespace m2m
