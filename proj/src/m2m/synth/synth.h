#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2m/core/grid.h"
#include "m2m/core/rng.h"
#include "m2m/core/volume.h"

namespace m2m {

// Procedural bi-modal dataset with known ground truth. One template anatomy
// of compact structures is deformed per subject by a random stationary shear
// velocity field whose displacements are whole voxels, so the stored
// forward/inverse warps are exact lattice bijections: warped label maps,
// both modality renderings, and ground-truth correspondences between any two
// subjects are all reproducible on disk without resampling error.

struct SynthConfig {
    std::string out_dir;
    Shape3 shape{32, 32, 32};
    int n_train = 16;
    int n_test = 4;
    int n_structs = 6;
    uint64_t seed = 7;
    double warp_sigma = 8.0;     // smoothing of the subject velocity fields, voxels
    double warp_mag = 6.0;       // peak |displacement|, whole voxels
    double noise_sd = 0.02;      // additive intensity noise
    double bias_amplitude = 0.1; // peak of the multiplicative bias field
    bool overwrite = false;
};

// Anatomy: equal-sized compact blobs, each carved from the best-scoring
// voxels within a dilation of the previous structure, all confined to an
// interior margin so subject warps never push them off the grid. Labels are
// 0 (background) .. n_structs. margin < 0 picks min(extent/4, 8).
LabelVolume gen_anatomy(uint64_t seed, Shape3 shape, int n_structs, int margin = -1);

// Per-class intensity profiles, n_classes entries in [0,1]. Profile A is
// monotone in class id; profile B permutes intensity across classes so the
// two renderings are deliberately not related by any monotone mapping.
std::vector<double> default_profile_a(int n_classes);
std::vector<double> default_profile_b(int n_classes);

// profile[class] * (1 + bias field), plus Gaussian noise, then intensity
// normalization. The bias field is a smooth random multiplier with peak
// |bias| = bias_amplitude.
Volume render_modality(const LabelVolume& labels, const std::vector<double>& profile,
                       double noise_sd, double bias_amplitude, uint64_t seed);

// Uniform noise per channel, Gaussian-smoothed, rescaled to peak magnitude.
Grid<double> smooth_noise_field(Shape3 shape, int channels, double sigma, double max_magnitude,
                                Rng& rng);

struct SubjectEntry {
    std::string id;
    std::string split;  // "train" or "test"
    uint64_t seed = 0;
    // Paths relative to the manifest directory.
    std::string vol_a, vol_b, labels, warp_fwd, warp_inv;
};

struct DatasetManifest {
    int version = 1;
    Shape3 shape{0, 0, 0};
    int n_classes = 0;
    double initial_dsc = 0.0;  // identity-transform mean DSC over the fixed test pairing
    std::string root;          // directory holding the manifest; set on load/generate
    std::vector<SubjectEntry> entries;

    std::vector<int> split_indices(const std::string& split) const;
};

struct SubjectData {
    Volume vol_a;
    Volume vol_b;
    LabelVolume labels;
    Grid<double> warp_fwd;  // template -> subject displacement
    Grid<double> warp_inv;  // its inverse
};

DatasetManifest gen_dataset(const SynthConfig& cfg);
DatasetManifest load_manifest(const std::string& path);
SubjectData load_subject(const DatasetManifest& m, const SubjectEntry& e);

}  // namespace m2m
