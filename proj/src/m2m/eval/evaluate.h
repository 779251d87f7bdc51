#pragma once

#include <functional>
#include <string>
#include <vector>

#include "m2m/core/grid.h"
#include "m2m/eval/metrics.h"
#include "m2m/model/model.h"
#include "m2m/objectives/losses.h"
#include "m2m/synth/synth.h"

namespace m2m {

struct EvalConfig {
    std::string split = "test";
    std::size_t max_pairs = kEvalMaxPairs;
    uint64_t seed = kEvalPairSeed;
    MetricCfg metric;  // multi-modal similarity logged alongside DSC
};

// One evaluation snapshot. The loss fields stay NaN unless a trainer fills
// them in; everything else is averaged over the fixed cross-subject pairing.
struct MetricsRecord {
    int step = 0;
    double mean_dsc = 0.0;
    std::vector<double> per_class_dsc;  // index = class id, NaN where never seen
    double neg_jacobian_pct = 0.0;      // percent of voxels with |J| < 0
    double lncc_mm = 0.0;               // lncc(warped source A, target B)
    double loss_total = 0.0, loss_sim = 0.0, loss_reg = 0.0, loss_gcc = 0.0;
};

// Displacement field for one ordered (source, target) pair, on the target
// grid. Evaluation warps the source volume/labels through it.
using FieldFn = std::function<Grid<double>(const SubjectData& src, const SubjectData& dst,
                                           const SubjectEntry& src_e, const SubjectEntry& dst_e)>;

// Key for per-pair stored fields (the field-bank backend).
std::string pair_key(const std::string& src_id, const std::string& dst_id);

// Core loop: averages DSC, %|J|<0, and multi-modal LNCC over the seeded
// cross-subject (A-modality source, B-modality target) pairing of the chosen
// split. Deterministic; an identity provider reproduces the manifest's
// cached initial DSC exactly.
MetricsRecord evaluate_fields(const FieldFn& fields, const DatasetManifest& man,
                              const EvalConfig& cfg);

// Evaluate a trained model: the amortized backend predicts each pair's field,
// the bank backend looks pairs up by key and falls back to the identity
// transform for pairs it never optimized.
MetricsRecord evaluate_model(const ModelParams& params, const DatasetManifest& man,
                             const EvalConfig& cfg);

// ---- similarity-vs-overlap diagnostic ----------------------------------

struct DiagRow {
    double step = 0.0;
    double lncc_mm = 0.0;
    double dsc = 0.0;
    double delta_dsc = 0.0;  // dsc minus the first row's dsc
};

struct DiagResult {
    std::vector<DiagRow> rows;
    double spearman_lncc_dsc = 0.0;  // 0 with `degenerate` set when ranks collapse
    bool degenerate = false;
    double initial_dsc = 0.0;
    double final_dsc = 0.0;
    double delta_dsc = 0.0;  // final minus initial
};

// Reads a training metrics CSV (header names matter, column order does not),
// keeps the rows carrying evaluation values, and summarizes how the logged
// multi-modal similarity relates to true overlap across training. Optionally
// writes the derived table (step,lncc_mm,dsc,delta_dsc_vs_initial) and a JSON
// summary. Throws std::runtime_error on malformed input.
DiagResult diag_curves(const std::string& metrics_csv, const std::string& derived_csv = "",
                       const std::string& summary_json = "");

}  // namespace m2m
