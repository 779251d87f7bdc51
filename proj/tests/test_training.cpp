#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "m2m/train/train.h"
#include "m2m/transform/field.h"

using namespace m2m;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p;
}

// Roster stub for sampler-only tests: the sampler never dereferences pixels.
TrainData roster_of(int n) {
    TrainData d;
    d.subjects.resize(std::size_t(n));
    return d;
}

// Small real dataset with enough train subjects for four-distinct quads.
std::string quad_dataset(const std::string& name, uint64_t seed) {
    SynthConfig cfg;
    cfg.out_dir = fresh_dir(name).string();
    cfg.shape = {16, 16, 16};
    cfg.n_train = 5;
    cfg.n_test = 2;
    cfg.n_structs = 3;
    cfg.seed = seed;
    cfg.warp_mag = 2.0;
    gen_dataset(cfg);
    return cfg.out_dir;
}

TrainConfig base_config(const std::string& data_dir, const std::string& out_dir) {
    TrainConfig cfg;
    cfg.data_dir = data_dir;
    cfg.out_dir = out_dir;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(bool(in));
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("config validation rejects out-of-range settings") {
    TrainConfig ok = base_config("d", "o");
    CHECK_NOTHROW(ok.validate());

    auto expect_throw = [](TrainConfig c) {
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    };
    TrainConfig c = ok;
    c.data_dir.clear();
    expect_throw(c);
    c = ok;
    c.out_dir.clear();
    expect_throw(c);
    c = ok;
    c.lambda_reg = -0.5;
    expect_throw(c);
    c = ok;
    c.lambda_gcc = std::nan("");
    expect_throw(c);
    c = ok;
    c.learning_rate = 0.0;
    expect_throw(c);
    c = ok;
    c.batch_size = 0;
    expect_throw(c);
    c = ok;
    c.iterations = -1;
    expect_throw(c);
    c = ok;
    c.eval_interval = 0;
    expect_throw(c);
    c = ok;
    c.regime = Regime::M2mSemi;
    c.bridge_aligned_ratio = 1.5;
    expect_throw(c);
    c = ok;
    c.bridge_aligned_ratio = 0.5;  // ratio without the semi regime
    expect_throw(c);
    c = ok;
    c.bridge_subjects = {"s0"};  // subset without the semi regime
    expect_throw(c);
    c = ok;
    c.reg_kind = RegKind::Gradicon;  // gradicon outside baseline
    expect_throw(c);
    c = ok;
    c.metric.radius = 0;
    expect_throw(c);
    c = ok;
    c.metric.eps = 0.0;
    expect_throw(c);

    TrainConfig semi = ok;
    semi.regime = Regime::M2mSemi;
    semi.bridge_aligned_ratio = 0.25;
    CHECK_NOTHROW(semi.validate());
    TrainConfig gi = ok;
    gi.regime = Regime::Baseline;
    gi.reg_kind = RegKind::Gradicon;
    CHECK_NOTHROW(gi.validate());

    CHECK(parse_regime("m2m_semi") == Regime::M2mSemi);
    CHECK_THROWS_AS(parse_regime("supervised"), std::invalid_argument);
    CHECK(parse_reg_kind("gradicon") == RegKind::Gradicon);
    CHECK_THROWS_AS(parse_reg_kind("bending"), std::invalid_argument);
    CHECK(std::string(regime_name(Regime::Baseline)) == "baseline");
    CHECK(std::string(reg_kind_name(RegKind::Diffusion)) == "diffusion");
}

TEST_CASE("quad sampling keeps subjects distinct across a thousand draws") {
    const TrainData data = roster_of(9);
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        const QuadSample q = sample_quad(data, rng, Regime::M2m, 0.0);
        REQUIRE(q.has_bridge);
        CHECK(!q.bridge_is_aligned);
        std::set<int> ids{q.s, q.t, q.sp, q.tp};
        CHECK(ids.size() == 4);  // pairwise distinct
        for (int v : ids) {
            CHECK(v >= 0);
            CHECK(v < 9);
        }
    }
    for (int i = 0; i < 1000; ++i) {
        const QuadSample q = sample_quad(data, rng, Regime::Baseline, 0.0);
        CHECK(!q.has_bridge);
        CHECK(q.sp == -1);
        CHECK(q.tp == -1);
        CHECK(q.s != q.t);
    }
    for (int i = 0; i < 1000; ++i) {
        const QuadSample q = sample_quad(data, rng, Regime::M2mSemi, 0.5);
        REQUIRE(q.has_bridge);
        if (q.bridge_is_aligned) {
            CHECK(q.sp == q.tp);
            CHECK(q.sp != q.s);
            CHECK(q.sp != q.t);
            CHECK(q.s != q.t);
        } else {
            std::set<int> ids{q.s, q.t, q.sp, q.tp};
            CHECK(ids.size() == 4);
        }
    }
}

TEST_CASE("semi-supervised bridge alignment tracks the configured ratio") {
    const TrainData data = roster_of(12);
    Rng rng(101);
    int aligned = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i)
        aligned += sample_quad(data, rng, Regime::M2mSemi, 0.25).bridge_is_aligned ? 1 : 0;
    const double frac = double(aligned) / draws;
    CHECK(frac > 0.23);
    CHECK(frac < 0.27);

    Rng all(5);
    for (int i = 0; i < 200; ++i)
        CHECK(sample_quad(data, all, Regime::M2mSemi, 1.0).bridge_is_aligned);
    for (int i = 0; i < 200; ++i)
        CHECK(!sample_quad(data, all, Regime::M2mSemi, 0.0).bridge_is_aligned);
}

TEST_CASE("a fixed bridge subset forces aligned bridges drawn from the subset") {
    const TrainData data = roster_of(8);
    const std::vector<int> pool{2, 5};
    Rng rng(77);
    for (int i = 0; i < 500; ++i) {
        // Ratio 0 would mean never-aligned in ratio mode; the subset overrides it.
        const QuadSample q = sample_quad(data, rng, Regime::M2mSemi, 0.0, pool);
        REQUIRE(q.bridge_is_aligned);
        CHECK(q.sp == q.tp);
        CHECK((q.sp == 2 || q.sp == 5));
        CHECK(q.s != q.sp);
        CHECK(q.t != q.sp);
        CHECK(q.s != q.t);
    }
    CHECK_THROWS_AS(sample_quad(data, rng, Regime::M2mSemi, 0.0, {8}), std::invalid_argument);
}

TEST_CASE("quad sampling refuses rosters that are too small") {
    Rng rng(1);
    TrainData three = roster_of(3);
    CHECK_THROWS_AS(sample_quad(three, rng, Regime::M2m, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(sample_quad(three, rng, Regime::M2mSemi, 0.5), std::invalid_argument);
    CHECK_NOTHROW(sample_quad(three, rng, Regime::Baseline, 0.0));
    TrainData one = roster_of(1);
    CHECK_THROWS_AS(sample_quad(one, rng, Regime::Baseline, 0.0), std::invalid_argument);
}

TEST_CASE("adam follows the bias-corrected update formula") {
    ModelParams params = init_field_bank({4, 4, 4});
    bank_register(params, "p");
    Grid<float>& p = bank_ref(params, "p");
    std::fill(p.data.begin(), p.data.end(), 0.5f);

    AdamState state;
    const double lr = 1e-3, g = 0.2;
    NamedGrads grads{{"p", Grid<float>({4, 4, 4}, 3, float(g))}};

    adam_step(params, grads, state, lr);
    CHECK(state.t == 1);
    // Constant gradient: m-hat == g and v-hat == g^2, so the step is
    // -lr * g / (|g| + eps) ~= -lr * sign(g).
    const double expect1 = 0.5 - lr * (g / (std::sqrt(g * g) + 1e-8));
    CHECK(std::abs((0.5 - expect1) - lr) / lr < 1e-6);  // step ~= -lr * sign(g)
    for (float v : p.data) CHECK(double(v) == doctest::Approx(expect1).epsilon(1e-6));

    adam_step(params, grads, state, lr);
    CHECK(state.t == 2);
    const double expect2 = expect1 - lr * (g / (std::sqrt(g * g) + 1e-8));
    for (float v : p.data) CHECK(double(v) == doctest::Approx(expect2).epsilon(1e-6));
}

TEST_CASE("adam leaves parameters untouched for zero gradients") {
    ModelParams params = init_field_bank({4, 4, 4});
    bank_register(params, "p");
    std::fill(bank_ref(params, "p").data.begin(), bank_ref(params, "p").data.end(), 0.5f);
    AdamState state;
    NamedGrads grads{{"p", Grid<float>({4, 4, 4}, 3, 0.0f)}};
    adam_step(params, grads, state, 0.1);
    for (float v : bank_ref(params, "p").data) CHECK(v == 0.5f);
}

TEST_CASE("adam names the tensor carrying a non-finite gradient") {
    ModelParams params = init_field_bank({4, 4, 4});
    bank_register(params, "bad_pair");
    AdamState state;
    Grid<float> g({4, 4, 4}, 3, 0.0f);
    g.data[7] = std::numeric_limits<float>::infinity();
    NamedGrads grads{{"bad_pair", g}};
    CHECK_THROWS_WITH_AS(adam_step(params, grads, state, 0.1), doctest::Contains("bad_pair"),
                         std::runtime_error);

    NamedGrads mismatch{{"bad_pair", Grid<float>({2, 2, 2}, 3, 0.0f)}};
    CHECK_THROWS_AS(adam_step(params, mismatch, state, 0.1), std::invalid_argument);
}

TEST_CASE("a fresh model's step losses equal explicit identity-field losses") {
    const std::string dir = quad_dataset("m2m_train_zeroinit", 301);
    TrainData data = load_train_data(dir + "/manifest.json");
    const Grid<double> id(data.manifest.shape, 3, 0.0);

    TrainConfig cfg = base_config(dir, fresh_dir("m2m_train_zeroinit_out").string());
    cfg.backend = BackendKind::Amortized;
    cfg.regime = Regime::M2m;

    ModelParams params = init_params(cfg.arch, 9);
    AdamState adam;
    QuadSample q;
    q.s = 0, q.t = 1, q.sp = 2, q.tp = 3;
    q.has_bridge = true;
    const StepResult res = train_step(params, data, {q}, cfg, adam);

    const auto& sub = data.subjects;
    const M2mTerms eager = m2m_loss(sub[0].vol_a, sub[1].vol_b, sub[2].vol_a, sub[3].vol_b, id, id,
                                    &id, id, cfg.metric);
    REQUIRE(res.loss.sim_terms.size() == 4);
    CHECK(res.loss.sim_terms[0].second == doctest::Approx(eager.s_sp).epsilon(5e-5));
    CHECK(res.loss.sim_terms[1].second == doctest::Approx(eager.sp_s).epsilon(5e-5));
    CHECK(res.loss.sim_terms[2].second == doctest::Approx(eager.t_tp).epsilon(5e-5));
    CHECK(res.loss.sim_terms[3].second == doctest::Approx(eager.tp_t).epsilon(5e-5));
    CHECK(res.loss.reg_term == 0.0);  // identity fields have zero diffusion energy
    CHECK(res.loss.gcc_term == 0.0);
    CHECK(res.loss.total == doctest::Approx(eager.sum()).epsilon(5e-5));

    // Baseline against the eager conventional loss.
    TrainConfig bcfg = cfg;
    bcfg.regime = Regime::Baseline;
    bcfg.lambda_reg = 1.5;
    ModelParams bparams = init_params(bcfg.arch, 9);
    AdamState badam;
    QuadSample bq;
    bq.s = 0, bq.t = 1;
    const StepResult bres = train_step(bparams, data, {bq}, bcfg, badam);
    const LossBreakdown eager_b =
        conventional_loss(sub[0].vol_a, sub[1].vol_b, id, bcfg.lambda_reg, bcfg.metric);
    REQUIRE(bres.loss.sim_terms.size() == 1);
    CHECK(bres.loss.sim_terms[0].second ==
          doctest::Approx(eager_b.sim_terms[0].second).epsilon(5e-5));
    CHECK(bres.loss.reg_term == 0.0);
    CHECK(bres.loss.total == doctest::Approx(eager_b.total).epsilon(5e-5));
}

TEST_CASE("bank-backend optimization drives the loss down on a fixed quad") {
    const std::string dir = quad_dataset("m2m_train_smoke", 302);
    TrainData data = load_train_data(dir + "/manifest.json");

    TrainConfig cfg = base_config(dir, fresh_dir("m2m_train_smoke_out").string());
    cfg.backend = BackendKind::FieldBank;
    cfg.regime = Regime::M2m;
    cfg.learning_rate = 0.02;

    ModelParams params = init_field_bank(data.manifest.shape);
    AdamState adam;
    QuadSample q;
    q.s = 0, q.t = 1, q.sp = 2, q.tp = 3;
    q.has_bridge = true;

    std::vector<double> totals;
    for (int i = 0; i < 50; ++i) totals.push_back(train_step(params, data, {q}, cfg, adam).loss.total);
    int decreases = 0;
    for (std::size_t i = 1; i < totals.size(); ++i)
        if (totals[i] < totals[i - 1]) ++decreases;
    CHECK(decreases >= 40);
    CHECK(totals.back() < totals.front());
}

TEST_CASE("field counts and regime isolation are instrumented") {
    const std::string dir = quad_dataset("m2m_train_counts", 303);
    TrainData data = load_train_data(dir + "/manifest.json");

    TrainConfig cfg = base_config(dir, fresh_dir("m2m_train_counts_out").string());
    cfg.backend = BackendKind::FieldBank;
    cfg.learning_rate = 0.01;
    cfg.regime = Regime::M2mSemi;
    cfg.bridge_aligned_ratio = 0.5;

    ModelParams params = init_field_bank(data.manifest.shape);
    AdamState adam;

    QuadSample aligned;
    aligned.s = 0, aligned.t = 1, aligned.sp = 2, aligned.tp = 2;
    aligned.has_bridge = true;
    aligned.bridge_is_aligned = true;
    StepResult r = train_step(params, data, {aligned}, cfg, adam);
    CHECK(r.fields_predicted == 3);  // the pre-aligned bridge link is free
    CHECK(r.gcc_evaluated);

    QuadSample unaligned;
    unaligned.s = 0, unaligned.t = 1, unaligned.sp = 2, unaligned.tp = 3;
    unaligned.has_bridge = true;
    r = train_step(params, data, {unaligned}, cfg, adam);
    CHECK(r.fields_predicted == 4);

    TrainConfig bcfg = cfg;
    bcfg.regime = Regime::Baseline;
    bcfg.bridge_aligned_ratio = 0.0;
    QuadSample pair;
    pair.s = 0, pair.t = 1;
    r = train_step(params, data, {pair}, bcfg, adam);
    CHECK(r.fields_predicted == 1);
    CHECK(!r.gcc_evaluated);  // the baseline never touches the cycle penalty
    CHECK(r.loss.gcc_term == 0.0);
    CHECK(r.loss.lambda_gcc == 0.0);
    CHECK(r.loss.sim_terms.size() == 1);

    TrainConfig gcfg = bcfg;
    gcfg.reg_kind = RegKind::Gradicon;
    r = train_step(params, data, {pair}, gcfg, adam);
    CHECK(r.fields_predicted == 2);  // forward and backward field
    CHECK(!r.gcc_evaluated);
    CHECK(r.loss.sim_terms.size() == 2);
}

TEST_CASE("zero iterations writes the initial checkpoint and identity metrics") {
    const std::string dir = quad_dataset("m2m_train_iter0", 304);
    const DatasetManifest man = load_manifest(dir + "/manifest.json");

    TrainConfig cfg = base_config(dir, fresh_dir("m2m_train_iter0_out").string());
    cfg.backend = BackendKind::Amortized;
    cfg.iterations = 0;

    const TrainReport rep = train(cfg);
    CHECK(rep.steps_run == 0);
    REQUIRE(rep.checkpoints.size() == 1);
    CHECK(fs::path(rep.checkpoints[0]).filename() == "ckpt_000000.bin");
    CHECK(rep.final_eval.mean_dsc == man.initial_dsc);  // fresh model == identity
    CHECK(rep.final_eval.neg_jacobian_pct == 0.0);

    std::ifstream csv(rep.metrics_csv);
    REQUIRE(bool(csv));
    std::string header, row, extra;
    REQUIRE(std::getline(csv, header));
    CHECK(header == "step,loss_total,loss_sim,loss_reg,loss_gcc,eval_dsc,eval_negjac,eval_lncc_mm");
    REQUIRE(std::getline(csv, row));
    CHECK(row.rfind("0,,,,,", 0) == 0);  // no loss has been computed yet
    CHECK(!std::getline(csv, extra));
}

TEST_CASE("identical configurations reproduce metrics and checkpoints bit for bit") {
    const std::string dir = quad_dataset("m2m_train_det", 305);

    auto run = [&](const std::string& out) {
        TrainConfig cfg = base_config(dir, fresh_dir(out).string());
        cfg.backend = BackendKind::FieldBank;
        cfg.regime = Regime::M2m;
        cfg.learning_rate = 0.02;
        cfg.iterations = 4;
        cfg.eval_interval = 2;
        cfg.batch_size = 2;
        cfg.eval_split = "train";
        cfg.seed = 99;
        return train(cfg);
    };
    const TrainReport a = run("m2m_train_det_a");
    const TrainReport b = run("m2m_train_det_b");

    CHECK(slurp(a.metrics_csv) == slurp(b.metrics_csv));
    REQUIRE(a.checkpoints.size() == b.checkpoints.size());
    CHECK(slurp(a.checkpoints.back()) == slurp(b.checkpoints.back()));

    // One metrics row per step plus the header and the step-0 row.
    std::ifstream csv(a.metrics_csv);
    int lines = 0;
    std::string line;
    while (std::getline(csv, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 1 + 1 + 4);
}

TEST_CASE("resumed training matches an uninterrupted run") {
    const std::string dir = quad_dataset("m2m_train_resume", 306);

    auto make_cfg = [&](const std::string& out, int iters) {
        TrainConfig cfg = base_config(dir, out);
        cfg.backend = BackendKind::FieldBank;
        cfg.regime = Regime::M2m;
        cfg.learning_rate = 0.02;
        cfg.iterations = iters;
        cfg.eval_interval = 3;
        cfg.batch_size = 1;
        cfg.eval_split = "train";
        cfg.seed = 7;
        return cfg;
    };

    const std::string full_out = fresh_dir("m2m_train_resume_full").string();
    const TrainReport full = train(make_cfg(full_out, 6));

    const std::string part_out = fresh_dir("m2m_train_resume_part").string();
    train(make_cfg(part_out, 3));
    TrainConfig resume_cfg = make_cfg(part_out, 6);
    resume_cfg.resume = true;
    const TrainReport resumed = train(resume_cfg);

    CHECK(resumed.steps_run == 3);
    CHECK(slurp(full.metrics_csv) == slurp(resumed.metrics_csv));
    CHECK(slurp(full_out + "/ckpt_000006.bin") == slurp(part_out + "/ckpt_000006.bin"));
    CHECK(slurp(full_out + "/ckpt_000006.opt") == slurp(part_out + "/ckpt_000006.opt"));
}

TEST_CASE("training rejects bridge subjects outside the train split") {
    const std::string dir = quad_dataset("m2m_train_badbridge", 307);
    TrainConfig cfg = base_config(dir, fresh_dir("m2m_train_badbridge_out").string());
    cfg.regime = Regime::M2mSemi;
    cfg.backend = BackendKind::FieldBank;
    cfg.iterations = 1;
    cfg.bridge_subjects = {"no_such_subject"};
    CHECK_THROWS_WITH_AS(train(cfg), doctest::Contains("no_such_subject"), std::invalid_argument);
}
