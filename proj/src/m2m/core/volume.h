#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "m2m/core/grid.h"

namespace m2m {

// Orientation matrices read from NIfTI headers. Kept so that a load/save
// round trip preserves them; registration itself works in voxel space and
// never applies them.
struct OrientationMeta {
    int16_t qform_code = 0;
    int16_t sform_code = 0;
    std::array<float, 6> quatern{0, 0, 0, 0, 0, 0};  // b, c, d, qoffset x/y/z
    std::array<float, 12> srow{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
};

// Dense scalar volume. Values are real; intensities are expected in [0,1]
// after normalize_intensity.
struct Volume {
    Grid<double> values;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string modality_tag;
    OrientationMeta meta;

    Volume() = default;
    Volume(Shape3 shape, double fill = 0.0) : values(shape, 1, fill) {}

    const Shape3& shape() const { return values.shape; }
    std::size_t voxels() const { return values.voxels(); }
    double& at(int x, int y, int z) { return values.at(0, x, y, z); }
    double at(int x, int y, int z) const { return values.at(0, x, y, z); }

    void validate() const;
};

// Per-voxel class ids; class 0 is background.
struct LabelVolume {
    Shape3 shape{0, 0, 0};
    std::vector<uint8_t> data;
    int n_classes = 0;

    LabelVolume() = default;
    LabelVolume(Shape3 s, int classes)
        : shape(s), data(std::size_t(s[0]) * s[1] * s[2], 0), n_classes(classes) {}

    std::size_t voxels() const { return std::size_t(shape[0]) * shape[1] * shape[2]; }
    uint8_t& at(int x, int y, int z) { return data[idx(x, y, z)]; }
    uint8_t at(int x, int y, int z) const { return data[idx(x, y, z)]; }
    std::size_t idx(int x, int y, int z) const {
        return std::size_t(x) + std::size_t(shape[0]) * (std::size_t(y) + std::size_t(shape[1]) * z);
    }

    void validate() const;
};

// Upper percentile by the nearest-rank rule: the value at 1-based index
// ceil(p/100 * N) of the sorted data.
double nearest_rank_percentile(std::vector<double> values, double p);

// Clip at the upper `clip_percentile`, then rescale to [0,1]. A volume that
// is constant after clipping maps to all zeros.
Volume normalize_intensity(const Volume& vol, double clip_percentile = 99.9);

}  // namespace m2m
