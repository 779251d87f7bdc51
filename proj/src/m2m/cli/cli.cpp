#include "m2m/cli/cli.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>

#include "CLI11.hpp"
#include "json.hpp"

#include "m2m/core/nifti.h"
#include "m2m/core/toml.h"
#include "m2m/eval/evaluate.h"
#include "m2m/model/model.h"
#include "m2m/synth/synth.h"
#include "m2m/train/train.h"
#include "m2m/transform/field.h"

namespace m2m {

namespace fs = std::filesystem;

namespace {

// Thrown during argument/config handling; everything else is a runtime error.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

TomlTable load_config(const std::string& path, const std::vector<std::string>& overrides) {
    TomlTable t;
    try {
        t = TomlTable::parse_file(path);
        for (const auto& ov : overrides) t.set_from_assignment(ov);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return t;
}

void reject_unknown_keys(const TomlTable& t, const std::string& subcommand,
                         const std::set<std::string>& known) {
    for (const auto& key : t.keys()) {
        if (!known.count(key))
            throw ConfigError("unknown config key '" + key + "' for subcommand '" + subcommand +
                              "'");
    }
}

std::string require_string(const TomlTable& t, const std::string& key) {
    if (!t.has(key)) throw ConfigError("missing required config key '" + key + "'");
    return t.get_string(key, "");
}

// Writes the merged key/value set next to the command's outputs.
void write_snapshot(const TomlTable& t, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    t.write_file((out_dir / "resolved_config.toml").string());
}

// Accepts `shape = 32` (cube) or `shape = [x, y, z]`.
Shape3 shape_from_config(const TomlTable& t, const std::string& key, Shape3 def) {
    if (!t.has(key)) return def;
    try {
        long long n = t.get_int(key, 0);
        return Shape3{int(n), int(n), int(n)};
    } catch (const std::exception&) {
    }
    auto arr = t.get_int_array(key);
    if (arr.size() == 1) return Shape3{int(arr[0]), int(arr[0]), int(arr[0])};
    if (arr.size() == 3) return Shape3{int(arr[0]), int(arr[1]), int(arr[2])};
    throw ConfigError("config key '" + key + "' must be one extent or three");
}

MetricCfg metric_from_config(const TomlTable& t, const std::string& prefix) {
    MetricCfg m;
    if (t.has(prefix + ".metric")) m.metric = parse_sim_metric(t.get_string(prefix + ".metric", ""));
    m.radius = int(t.get_int(prefix + ".lncc_radius", m.radius));
    m.eps = t.get_double(prefix + ".lncc_eps", m.eps);
    return m;
}

// ---- synth ---------------------------------------------------------------

int cmd_synth(const TomlTable& t, std::ostream& out) {
    reject_unknown_keys(t, "synth",
                        {"synth.out_dir", "synth.shape", "synth.n_train", "synth.n_test",
                         "synth.n_structs", "synth.seed", "synth.warp_sigma", "synth.warp_mag",
                         "synth.noise_sd", "synth.bias_amplitude", "synth.overwrite"});
    SynthConfig cfg;
    cfg.out_dir = require_string(t, "synth.out_dir");
    cfg.shape = shape_from_config(t, "synth.shape", cfg.shape);
    cfg.n_train = int(t.get_int("synth.n_train", cfg.n_train));
    cfg.n_test = int(t.get_int("synth.n_test", cfg.n_test));
    cfg.n_structs = int(t.get_int("synth.n_structs", cfg.n_structs));
    cfg.seed = uint64_t(t.get_int("synth.seed", int64_t(cfg.seed)));
    cfg.warp_sigma = t.get_double("synth.warp_sigma", cfg.warp_sigma);
    cfg.warp_mag = t.get_double("synth.warp_mag", cfg.warp_mag);
    cfg.noise_sd = t.get_double("synth.noise_sd", cfg.noise_sd);
    cfg.bias_amplitude = t.get_double("synth.bias_amplitude", cfg.bias_amplitude);
    cfg.overwrite = t.get_bool("synth.overwrite", cfg.overwrite);

    // Creating one new directory level is expected; a missing grandparent is
    // almost always a typo'd path, so refuse instead of building the tree.
    const fs::path parent = fs::path(cfg.out_dir).parent_path();
    if (!parent.empty() && !fs::exists(parent))
        throw std::runtime_error("synth: parent directory " + parent.string() +
                                 " does not exist");

    DatasetManifest man = gen_dataset(cfg);
    write_snapshot(t, cfg.out_dir);
    out << "synth: wrote " << man.split_indices("train").size() << " train + "
        << man.split_indices("test").size() << " test subjects to " << cfg.out_dir
        << " (initial DSC " << man.initial_dsc << ")\n";
    return 0;
}

// ---- train ---------------------------------------------------------------

int cmd_train(const TomlTable& t, std::ostream& out) {
    reject_unknown_keys(
        t, "train",
        {"train.data_dir", "train.out_dir", "train.regime", "train.backend", "train.metric",
         "train.lncc_radius", "train.lncc_eps", "train.reg_kind", "train.lambda_reg",
         "train.lambda_gcc", "train.learning_rate", "train.batch_size", "train.iterations",
         "train.eval_interval", "train.bridge_aligned_ratio", "train.bridge_subjects",
         "train.eval_split", "train.seed", "train.resume", "train.arch.in_channels",
         "train.arch.channels", "train.arch.kernel"});
    TrainConfig cfg;
    cfg.data_dir = require_string(t, "train.data_dir");
    cfg.out_dir = require_string(t, "train.out_dir");
    if (t.has("train.regime")) cfg.regime = parse_regime(t.get_string("train.regime", ""));
    if (t.has("train.backend")) cfg.backend = parse_backend(t.get_string("train.backend", ""));
    cfg.metric = metric_from_config(t, "train");
    if (t.has("train.reg_kind")) cfg.reg_kind = parse_reg_kind(t.get_string("train.reg_kind", ""));
    cfg.lambda_reg = t.get_double("train.lambda_reg", cfg.lambda_reg);
    cfg.lambda_gcc = t.get_double("train.lambda_gcc", cfg.lambda_gcc);
    cfg.learning_rate = t.get_double("train.learning_rate", cfg.learning_rate);
    cfg.batch_size = int(t.get_int("train.batch_size", cfg.batch_size));
    cfg.iterations = int(t.get_int("train.iterations", cfg.iterations));
    cfg.eval_interval = int(t.get_int("train.eval_interval", cfg.eval_interval));
    cfg.bridge_aligned_ratio = t.get_double("train.bridge_aligned_ratio", cfg.bridge_aligned_ratio);
    if (t.has("train.bridge_subjects")) cfg.bridge_subjects = t.get_string_array("train.bridge_subjects");
    cfg.eval_split = t.get_string("train.eval_split", cfg.eval_split);
    cfg.seed = uint64_t(t.get_int("train.seed", int64_t(cfg.seed)));
    cfg.resume = t.get_bool("train.resume", cfg.resume);
    if (t.has("train.arch.in_channels"))
        cfg.arch.in_channels = int(t.get_int("train.arch.in_channels", cfg.arch.in_channels));
    if (t.has("train.arch.channels")) {
        cfg.arch.channels.clear();
        for (long long c : t.get_int_array("train.arch.channels")) cfg.arch.channels.push_back(int(c));
    }
    if (t.has("train.arch.kernel")) cfg.arch.kernel = int(t.get_int("train.arch.kernel", cfg.arch.kernel));
    try {
        cfg.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }

    write_snapshot(t, cfg.out_dir);
    TrainReport rep = train(cfg);
    out << "train: " << rep.steps_run << " steps, final DSC " << rep.final_eval.mean_dsc
        << ", %|J|<0 " << rep.final_eval.neg_jacobian_pct << ", LNCC " << rep.final_eval.lncc_mm
        << "; metrics at " << rep.metrics_csv << "\n";
    return 0;
}

// ---- register ------------------------------------------------------------

int cmd_register(const TomlTable& t, std::ostream& out) {
    reject_unknown_keys(t, "register",
                        {"register.checkpoint", "register.source", "register.target",
                         "register.out_dir", "register.source_id", "register.target_id"});
    std::string ckpt_path = require_string(t, "register.checkpoint");
    std::string src_path = require_string(t, "register.source");
    std::string dst_path = require_string(t, "register.target");
    fs::path out_dir = require_string(t, "register.out_dir");
    std::string src_id = t.get_string("register.source_id", "");
    std::string dst_id = t.get_string("register.target_id", "");

    write_snapshot(t, out_dir);
    ModelParams params = load_checkpoint(ckpt_path);
    Volume src = load_volume(src_path);
    Volume dst = load_volume(dst_path);

    Grid<double> field;
    if (params.kind == BackendKind::Amortized) {
        field = predict_field(params, src, dst);
    } else {
        std::string key = pair_key(src_id, dst_id);
        if (!src_id.empty() && bank_has(params, key)) {
            const Grid<float>& f = bank_get(params, key);
            field = Grid<double>(f.shape, 3);
            for (std::size_t i = 0; i < f.data.size(); ++i) field.data[i] = f.data[i];
        } else {
            // Pairs the bank never optimized register through the identity.
            field = Grid<double>(dst.shape(), 3);
        }
    }
    Volume warped = warp_image(src, field);

    save_volume(warped, (out_dir / "warped.nii.gz").string());
    save_field(field, (out_dir / "field.nii.gz").string());
    out << "register: wrote " << (out_dir / "warped.nii.gz").string() << " and field\n";
    return 0;
}

// ---- eval ----------------------------------------------------------------

void write_metrics_json(const MetricsRecord& rec, const std::string& path) {
    nlohmann::json j;
    j["step"] = rec.step;
    j["mean_dsc"] = rec.mean_dsc;
    auto& pc = j["per_class_dsc"] = nlohmann::json::array();
    for (double d : rec.per_class_dsc) {
        if (std::isfinite(d))
            pc.push_back(d);
        else
            pc.push_back(nullptr);
    }
    j["neg_jacobian_pct"] = rec.neg_jacobian_pct;
    j["lncc_mm"] = rec.lncc_mm;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("eval: cannot write " + path);
    f << j.dump(2) << "\n";
}

int cmd_eval(const TomlTable& t, std::ostream& out) {
    reject_unknown_keys(t, "eval",
                        {"eval.checkpoint", "eval.manifest", "eval.out_dir", "eval.split",
                         "eval.max_pairs", "eval.seed", "eval.metric", "eval.lncc_radius",
                         "eval.lncc_eps"});
    std::string ckpt_path = require_string(t, "eval.checkpoint");
    std::string man_path = require_string(t, "eval.manifest");
    fs::path out_dir = require_string(t, "eval.out_dir");
    EvalConfig cfg;
    cfg.split = t.get_string("eval.split", cfg.split);
    cfg.max_pairs = std::size_t(t.get_int("eval.max_pairs", int64_t(cfg.max_pairs)));
    cfg.seed = uint64_t(t.get_int("eval.seed", int64_t(cfg.seed)));
    cfg.metric = metric_from_config(t, "eval");

    write_snapshot(t, out_dir);
    ModelParams params = load_checkpoint(ckpt_path);
    DatasetManifest man = load_manifest(man_path);
    MetricsRecord rec = evaluate_model(params, man, cfg);
    write_metrics_json(rec, (out_dir / "metrics.json").string());
    out << "eval: split " << cfg.split << ", mean DSC " << rec.mean_dsc << ", %|J|<0 "
        << rec.neg_jacobian_pct << ", LNCC " << rec.lncc_mm << "\n";
    return 0;
}

// ---- diag ----------------------------------------------------------------

int cmd_diag(const TomlTable& t, std::ostream& out) {
    reject_unknown_keys(t, "diag", {"diag.metrics_csv", "diag.out_dir"});
    std::string csv = require_string(t, "diag.metrics_csv");
    fs::path out_dir = require_string(t, "diag.out_dir");

    write_snapshot(t, out_dir);
    DiagResult res = diag_curves(csv, (out_dir / "derived.csv").string(),
                                 (out_dir / "summary.json").string());
    out << "diag: spearman(lncc, dsc) " << res.spearman_lncc_dsc
        << (res.degenerate ? " (degenerate)" : "") << ", delta DSC " << res.delta_dsc << " over "
        << res.rows.size() << " eval rows\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"deformable registration experiments: synthesize data, train, apply, evaluate"};
    app.require_subcommand(1);

    struct SubOpts {
        std::string config;
        std::vector<std::string> sets;
    };
    std::map<std::string, SubOpts> opts;
    std::map<std::string, int (*)(const TomlTable&, std::ostream&)> handlers = {
        {"synth", cmd_synth},     {"train", cmd_train}, {"register", cmd_register},
        {"eval", cmd_eval},       {"diag", cmd_diag},
    };
    std::map<std::string, std::string> blurbs = {
        {"synth", "generate a synthetic bi-modal dataset"},
        {"train", "run a registration training regime"},
        {"register", "warp a source volume with a trained checkpoint"},
        {"eval", "compute overlap/deformation metrics for a checkpoint"},
        {"diag", "summarize similarity-vs-overlap curves from a metrics CSV"},
    };
    for (auto& [name, handler] : handlers) {
        auto* sub = app.add_subcommand(name, blurbs[name]);
        auto& o = opts[name];
        sub->add_option("--config", o.config, "TOML config file")->required();
        sub->add_option("--set", o.sets, "dotted-key override, e.g. train.seed=3");
    }

    try {
        // CLI11's vector overload expects the arguments reversed.
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    }

    std::string name = app.get_subcommands().front()->get_name();
    try {
        TomlTable t = load_config(opts[name].config, opts[name].sets);
        return handlers[name](t, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace m2m
