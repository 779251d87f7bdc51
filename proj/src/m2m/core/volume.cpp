#include "m2m/core/volume.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace m2m {

void Volume::validate() const {
    if (values.channels != 1)
        throw std::invalid_argument("Volume: expected a single channel, got " +
                                    std::to_string(values.channels));
    if (values.data.size() != voxels())
        throw std::invalid_argument("Volume: data length " + std::to_string(values.data.size()) +
                                    " does not match shape " + shape_str(shape()));
    for (double s : spacing)
        if (!(s > 0.0))
            throw std::invalid_argument("Volume: non-positive spacing " + std::to_string(s));
}

void LabelVolume::validate() const {
    if (data.size() != voxels())
        throw std::invalid_argument("LabelVolume: data length does not match shape " +
                                    shape_str(shape));
    if (n_classes <= 0) throw std::invalid_argument("LabelVolume: n_classes must be positive");
    for (uint8_t v : data)
        if (int(v) >= n_classes)
            throw std::invalid_argument("LabelVolume: class id " + std::to_string(int(v)) +
                                        " out of range, n_classes=" + std::to_string(n_classes));
}

double nearest_rank_percentile(std::vector<double> values, double p) {
    if (values.empty()) throw std::invalid_argument("percentile of empty data");
    if (!(p > 0.0 && p <= 100.0))
        throw std::invalid_argument("percentile must lie in (0,100], got " + std::to_string(p));
    std::size_t n = values.size();
    // 1-based rank ceil(p/100 * n). The small backoff keeps decimal
    // percentiles like 99.9 from landing epsilon above an exact integer.
    std::size_t rank = std::size_t(std::ceil(p * double(n) / 100.0 - 1e-9));
    if (rank < 1) rank = 1;
    if (rank > n) rank = n;
    std::nth_element(values.begin(), values.begin() + (rank - 1), values.end());
    return values[rank - 1];
}

Volume normalize_intensity(const Volume& vol, double clip_percentile) {
    if (vol.values.data.empty()) throw std::invalid_argument("normalize_intensity: empty volume");
    double clip = nearest_rank_percentile(vol.values.data, clip_percentile);

    Volume out = vol;
    double lo = vol.values.data[0] < clip ? vol.values.data[0] : clip;
    for (double v : vol.values.data) lo = std::min(lo, v);
    double hi = clip;

    if (!(hi > lo)) {
        for (double& v : out.values.data) v = 0.0;
        return out;
    }
    double range = hi - lo;
    for (double& v : out.values.data) {
        double c = v > clip ? clip : v;
        v = (c - lo) / range;  // division keeps max at exactly 1
    }
    return out;
}

}  // namespace m2m
