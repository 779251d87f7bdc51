#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "m2m/core/volume.h"

namespace m2m {

// Defaults of the fixed evaluation pairing, shared by dataset generation
// (which caches the identity-transform DSC) and model evaluation.
inline constexpr std::size_t kEvalMaxPairs = 20;
inline constexpr uint64_t kEvalPairSeed = 9001;

// Per-class Dice overlap. Entry 0 (background) is never filled; classes empty
// in both volumes hold NaN and are excluded from the mean.
struct DscResult {
    std::vector<double> per_class;
    double mean = 0.0;
};

DscResult dsc(const LabelVolume& a, const LabelVolume& b, int n_classes);

// Spearman rank correlation with average ranks for ties. A constant input
// has no ordering, so the correlation is reported as 0 with `degenerate` set.
double spearman(const std::vector<double>& x, const std::vector<double>& y, bool& degenerate);

// The fixed evaluation pairing: all ordered cross pairs of n subjects, or a
// seeded sample of `max_pairs` of them when there are more.
std::vector<std::pair<int, int>> eval_pairs(int n_subjects, std::size_t max_pairs, uint64_t seed);

}  // namespace m2m
