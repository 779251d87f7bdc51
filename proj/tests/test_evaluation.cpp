#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "m2m/eval/evaluate.h"
#include "m2m/transform/field.h"

using namespace m2m;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p;
}

DatasetManifest small_dataset(const std::string& name, uint64_t seed) {
    SynthConfig cfg;
    cfg.out_dir = fresh_dir(name).string();
    cfg.shape = {16, 16, 16};
    cfg.n_train = 2;
    cfg.n_test = 3;
    cfg.n_structs = 3;
    cfg.seed = seed;
    cfg.warp_mag = 2.0;
    return gen_dataset(cfg);
}

FieldFn identity_provider(Shape3 shape) {
    return [shape](const SubjectData&, const SubjectData&, const SubjectEntry&,
                   const SubjectEntry&) { return identity_field(shape); };
}

FieldFn oracle_provider() {
    return [](const SubjectData& src, const SubjectData& dst, const SubjectEntry&,
              const SubjectEntry&) { return compose(src.warp_inv, dst.warp_fwd); };
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    REQUIRE(bool(out));
    out << text;
}

}  // namespace

TEST_CASE("identity fields reproduce the manifest's cached initial metrics exactly") {
    const auto man = small_dataset("m2m_eval_ident", 51);
    const EvalConfig cfg;
    const MetricsRecord rec = evaluate_fields(identity_provider(man.shape), man, cfg);

    CHECK(rec.mean_dsc == man.initial_dsc);  // bit-for-bit, not approximately
    CHECK(rec.neg_jacobian_pct == 0.0);
    // Signed local correlation: misaligned heterogeneous pairs may dip below 0.
    CHECK(rec.lncc_mm >= -1.0 - 1e-12);
    CHECK(rec.lncc_mm <= 1.0 + 1e-12);
    REQUIRE(int(rec.per_class_dsc.size()) == man.n_classes);
    for (int c = 1; c < man.n_classes; ++c) {
        CHECK(rec.per_class_dsc[c] >= 0.0);
        CHECK(rec.per_class_dsc[c] <= 1.0);
    }
    CHECK(std::isnan(rec.loss_total));

    // A fresh model has a zero-initialized head, so it scores identically.
    ArchDescriptor arch;
    const MetricsRecord net = evaluate_model(init_params(arch, 3), man, cfg);
    CHECK(net.mean_dsc == man.initial_dsc);
    CHECK(net.neg_jacobian_pct == 0.0);
    fs::remove_all(man.root);
}

TEST_CASE("ground-truth oracle fields push mean DSC to at least 0.95 on default data") {
    SynthConfig dcfg;  // default desk-scale grid and warp strength
    dcfg.out_dir = fresh_dir("m2m_eval_oracle").string();
    dcfg.n_train = 2;
    const auto man = gen_dataset(dcfg);

    const MetricsRecord rec = evaluate_fields(oracle_provider(), man, EvalConfig{});
    CHECK(rec.mean_dsc >= 0.95);
    CHECK(rec.mean_dsc > man.initial_dsc);
    CHECK(rec.lncc_mm > 0.0);
    fs::remove_all(man.root);
}

TEST_CASE("oracle multi-modal similarity stays modest while overlap is perfect") {
    // The heterogeneous profiles are the whole point: perfectly aligned A/B
    // pairs still do not look alike, which is what lets similarity-chasing
    // baselines go wrong.
    const auto man = small_dataset("m2m_eval_hetero", 52);
    const MetricsRecord oracle = evaluate_fields(oracle_provider(), man, EvalConfig{});
    CHECK(oracle.mean_dsc == 1.0);
    CHECK(oracle.lncc_mm < 0.9);
    fs::remove_all(man.root);
}

TEST_CASE("field bank evaluation uses stored pairs and identity elsewhere") {
    const auto man = small_dataset("m2m_eval_bank", 53);
    const EvalConfig cfg;

    ModelParams bank = init_field_bank(man.shape);
    const MetricsRecord empty_bank = evaluate_model(bank, man, cfg);
    CHECK(empty_bank.mean_dsc == man.initial_dsc);

    // Store the exact ground-truth field for every test pair; the bank then
    // scores like the oracle.
    const auto idx = man.split_indices("test");
    std::vector<SubjectData> subj;
    for (int t : idx) subj.push_back(load_subject(man, man.entries[t]));
    for (const auto& [a, b] : eval_pairs(int(idx.size()), cfg.max_pairs, cfg.seed)) {
        const std::string key = pair_key(man.entries[idx[a]].id, man.entries[idx[b]].id);
        bank_register(bank, key);
        const Grid<double> gt = compose(subj[a].warp_inv, subj[b].warp_fwd);
        Grid<float>& slot = bank_ref(bank, key);
        for (std::size_t i = 0; i < gt.data.size(); ++i) slot.data[i] = float(gt.data[i]);
    }
    const MetricsRecord full_bank = evaluate_model(bank, man, cfg);
    CHECK(full_bank.mean_dsc == 1.0);
    fs::remove_all(man.root);
}

TEST_CASE("evaluate_fields validates splits and provider output") {
    const auto man = small_dataset("m2m_eval_bad", 54);
    EvalConfig cfg;
    cfg.split = "validation";
    CHECK_THROWS_AS(evaluate_fields(identity_provider(man.shape), man, cfg), std::invalid_argument);

    EvalConfig ok;
    const FieldFn wrong_shape = [](const SubjectData&, const SubjectData&, const SubjectEntry&,
                                   const SubjectEntry&) { return identity_field({8, 8, 8}); };
    CHECK_THROWS_AS(evaluate_fields(wrong_shape, man, ok), std::invalid_argument);
    fs::remove_all(man.root);
}

TEST_CASE("evaluation is deterministic across repeated runs") {
    const auto man = small_dataset("m2m_eval_rep", 55);
    const MetricsRecord a = evaluate_fields(oracle_provider(), man, EvalConfig{});
    const MetricsRecord b = evaluate_fields(oracle_provider(), man, EvalConfig{});
    CHECK(a.mean_dsc == b.mean_dsc);
    CHECK(a.lncc_mm == b.lncc_mm);
    CHECK(a.neg_jacobian_pct == b.neg_jacobian_pct);
    fs::remove_all(man.root);
}

TEST_CASE("diag_curves summarizes co-increasing and constant histories") {
    const fs::path dir = fresh_dir("m2m_diag");
    fs::create_directories(dir);
    const fs::path csv = dir / "metrics.csv";

    write_file(csv,
               "step,loss_total,loss_sim,loss_reg,loss_gcc,eval_dsc,eval_negjac,eval_lncc_mm\n"
               "0,1.0,0.9,0.1,0.0,0.30,0.0,0.20\n"
               "10,0.9,0.8,0.1,0.0,,,\n"  // plain training row: skipped
               "20,0.8,0.7,0.1,0.0,0.40,0.0,0.35\n"
               "40,0.7,0.6,0.1,0.0,0.55,0.0,0.50\n");
    const fs::path derived = dir / "derived.csv";
    const fs::path summary = dir / "summary.json";
    const DiagResult res = diag_curves(csv.string(), derived.string(), summary.string());

    REQUIRE(res.rows.size() == 3);
    CHECK(res.spearman_lncc_dsc == doctest::Approx(1.0));
    CHECK(!res.degenerate);
    CHECK(res.delta_dsc == doctest::Approx(0.25));
    CHECK(res.rows[1].delta_dsc == doctest::Approx(0.10));

    std::ifstream dcheck(derived);
    std::string header;
    std::getline(dcheck, header);
    CHECK(header == "step,lncc_mm,dsc,delta_dsc_vs_initial");
    int data_rows = 0;
    for (std::string l; std::getline(dcheck, l);) data_rows += !l.empty();
    CHECK(data_rows == 3);

    nlohmann::json j;
    std::ifstream(summary) >> j;
    CHECK(j.at("rows").get<int>() == 3);
    CHECK(j.at("degenerate").get<bool>() == false);
    CHECK(j.at("spearman_lncc_dsc").get<double>() == doctest::Approx(1.0));

    // Constant columns: correlation pinned to 0 with the degeneracy flag.
    write_file(csv,
               "step,eval_dsc,eval_lncc_mm\n"
               "0,0.5,0.3\n"
               "10,0.5,0.3\n");
    const DiagResult flat = diag_curves(csv.string());
    CHECK(flat.spearman_lncc_dsc == 0.0);
    CHECK(flat.degenerate);
    CHECK(flat.delta_dsc == 0.0);
    fs::remove_all(dir);
}

TEST_CASE("diag_curves rejects malformed input by name") {
    const fs::path dir = fresh_dir("m2m_diag_bad");
    fs::create_directories(dir);
    const fs::path csv = dir / "metrics.csv";

    CHECK_THROWS_WITH_AS(diag_curves((dir / "missing.csv").string()),
                         doctest::Contains("cannot open"), std::runtime_error);

    write_file(csv, "step,loss_total\n0,1.0\n");
    CHECK_THROWS_WITH_AS(diag_curves(csv.string()), doctest::Contains("columns"),
                         std::runtime_error);

    write_file(csv, "step,eval_dsc,eval_lncc_mm\n0,0.5\n");
    CHECK_THROWS_WITH_AS(diag_curves(csv.string()), doctest::Contains("cells"),
                         std::runtime_error);

    write_file(csv, "step,eval_dsc,eval_lncc_mm\n0,abc,0.3\n");
    CHECK_THROWS_WITH_AS(diag_curves(csv.string()), doctest::Contains("not a number"),
                         std::runtime_error);

    write_file(csv, "step,eval_dsc,eval_lncc_mm\n");
    CHECK_THROWS_WITH_AS(diag_curves(csv.string()), doctest::Contains("no evaluation rows"),
                         std::runtime_error);
    fs::remove_all(dir);
}
