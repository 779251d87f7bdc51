#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "m2m/core/rng.h"
#include "m2m/eval/evaluate.h"
#include "m2m/model/model.h"
#include "m2m/objectives/losses.h"
#include "m2m/synth/synth.h"

namespace m2m {

enum class Regime { Baseline, M2m, M2mSemi };

Regime parse_regime(const std::string& name);
const char* regime_name(Regime r);

// Per-mapping regularizer. Gradicon (inverse-consistency of a forward/backward
// field pair) only applies to the baseline regime, which is the only one that
// predicts such a pair; the cyclic regimes pair per-field diffusion with the
// cycle penalty instead.
enum class RegKind { Diffusion, Gradicon };

RegKind parse_reg_kind(const std::string& name);
const char* reg_kind_name(RegKind k);

struct TrainConfig {
    std::string data_dir;  // dataset directory holding manifest.json
    std::string out_dir;   // receives metrics.csv and checkpoints

    Regime regime = Regime::M2m;
    BackendKind backend = BackendKind::Amortized;
    ArchDescriptor arch;  // amortized backend only
    MetricCfg metric;
    RegKind reg_kind = RegKind::Diffusion;

    double lambda_reg = 0.5;
    double lambda_gcc = 0.1;
    double learning_rate = 5e-5;
    int batch_size = 2;
    int iterations = 2000;
    int eval_interval = 200;

    // m2m_semi only: probability that the sampled bridge pair is pre-aligned.
    // A non-empty `bridge_subjects` switches to fixed-subset mode: every
    // bridge is aligned and its subject is drawn from that list.
    double bridge_aligned_ratio = 0.0;
    std::vector<std::string> bridge_subjects;

    std::string eval_split = "test";
    uint64_t seed = 42;
    bool resume = false;

    void validate() const;  // throws std::invalid_argument
};

// Training roster: the manifest plus every subject of the train split held in
// memory, in split order.
struct TrainData {
    DatasetManifest manifest;
    std::vector<int> train_indices;  // into manifest.entries
    std::vector<SubjectData> subjects;

    const SubjectEntry& entry(int roster_idx) const {
        return manifest.entries[std::size_t(train_indices[std::size_t(roster_idx)])];
    }
};

TrainData load_train_data(const std::string& manifest_path);

// One sampled training item. S pairs the source subject's A volume with the
// target subject's B volume; the bridge (S', T') closes the cycle. Indices
// point into TrainData::subjects; sp == tp marks a pre-aligned bridge drawn
// from a single subject, and baseline samples carry no bridge at all.
struct QuadSample {
    int s = -1, t = -1, sp = -1, tp = -1;
    bool has_bridge = false;
    bool bridge_is_aligned = false;
};

// Draws subject indices without replacement: (S, T) always come from distinct
// subjects, unaligned quads use four pairwise-distinct subjects, and aligned
// bridges reuse one subject for both S' and T'. `bridge_pool` (roster
// indices) activates fixed-subset mode for m2m_semi.
QuadSample sample_quad(const TrainData& data, Rng& rng, Regime regime,
                       double bridge_aligned_ratio, const std::vector<int>& bridge_pool = {});

// First/second moment buffers keyed by tensor (or bank-field) name, plus the
// shared step counter used for bias correction.
struct AdamState {
    std::map<std::string, std::pair<Grid<float>, Grid<float>>> moments;
    int64_t t = 0;
};

using NamedGrads = std::vector<std::pair<std::string, Grid<float>>>;

// Standard bias-corrected Adam update, applied in place. Throws
// std::runtime_error naming the tensor on a non-finite gradient.
void adam_step(ModelParams& params, const NamedGrads& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct StepResult {
    LossBreakdown loss;        // batch-averaged terms
    int fields_predicted = 0;  // summed over the batch: 1-2 baseline, 3 aligned, 4 unaligned
    bool gcc_evaluated = false;
};

// One optimizer step: builds the regime's loss graph per quad, averages
// gradients over the batch, and applies adam_step. Bank-backend pairs are
// registered (identity-initialized) on first use.
StepResult train_step(ModelParams& params, const TrainData& data,
                      const std::vector<QuadSample>& batch, const TrainConfig& cfg,
                      AdamState& adam);

struct TrainReport {
    std::string metrics_csv;
    std::vector<std::string> checkpoints;  // paths, in write order
    int steps_run = 0;                     // optimizer steps executed by this call
    MetricsRecord final_eval;
};

// Full training loop: evaluates and checkpoints at step 0, every
// eval_interval steps and at the end, appends one metrics row per step, and
// is bit-reproducible from (config, seed). With cfg.resume it continues from
// the newest checkpoint in out_dir (each checkpoint carries an optimizer
// sidecar and sampler state, so the resumed trajectory matches an
// uninterrupted run exactly).
TrainReport train(const TrainConfig& cfg);

}  // namespace m2m
