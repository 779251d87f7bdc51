#include "m2m/eval/metrics.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "m2m/core/rng.h"

namespace m2m {

DscResult dsc(const LabelVolume& a, const LabelVolume& b, int n_classes) {
    if (a.shape != b.shape) {
        throw std::invalid_argument("dsc: label volumes have different shapes " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
    }
    if (n_classes < 2) {
        throw std::invalid_argument("dsc: n_classes must be at least 2, got " + std::to_string(n_classes));
    }

    std::vector<std::size_t> size_a(n_classes, 0), size_b(n_classes, 0), inter(n_classes, 0);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const int la = a.data[i];
        const int lb = b.data[i];
        if (la >= n_classes || lb >= n_classes) {
            throw std::invalid_argument("dsc: label value exceeds n_classes-1 = " +
                                        std::to_string(n_classes - 1));
        }
        ++size_a[la];
        ++size_b[lb];
        if (la == lb) ++inter[la];
    }

    DscResult res;
    res.per_class.assign(n_classes, std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    int counted = 0;
    for (int c = 1; c < n_classes; ++c) {
        const std::size_t denom = size_a[c] + size_b[c];
        if (denom == 0) continue;  // absent everywhere: not informative
        res.per_class[c] = 2.0 * static_cast<double>(inter[c]) / static_cast<double>(denom);
        sum += res.per_class[c];
        ++counted;
    }
    res.mean = counted > 0 ? sum / counted : std::numeric_limits<double>::quiet_NaN();
    return res;
}

namespace {

// Average ranks (1-based); tied values share the mean of their rank span.
std::vector<double> average_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });

    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y, bool& degenerate) {
    if (x.size() != y.size()) {
        throw std::invalid_argument("spearman: series lengths differ: " + std::to_string(x.size()) +
                                    " vs " + std::to_string(y.size()));
    }
    degenerate = false;
    if (x.size() < 2) {
        degenerate = true;
        return 0.0;
    }

    const std::vector<double> rx = average_ranks(x);
    const std::vector<double> ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;

    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        const double dx = rx[i] - mx;
        const double dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        degenerate = true;
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

std::vector<std::pair<int, int>> eval_pairs(int n_subjects, std::size_t max_pairs, uint64_t seed) {
    if (n_subjects < 2) {
        throw std::invalid_argument("eval_pairs: need at least 2 subjects, got " +
                                    std::to_string(n_subjects));
    }
    std::vector<std::pair<int, int>> all;
    all.reserve(static_cast<std::size_t>(n_subjects) * (n_subjects - 1));
    for (int i = 0; i < n_subjects; ++i) {
        for (int j = 0; j < n_subjects; ++j) {
            if (i != j) all.emplace_back(i, j);
        }
    }
    if (all.size() <= max_pairs) return all;

    Rng rng(seed);
    for (std::size_t i = all.size() - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)));
        std::swap(all[i], all[j]);
    }
    all.resize(max_pairs);
    return all;
}

}  // namespace m2m
