#include "m2m/transform/field.h"

#include <cmath>
#include <stdexcept>

namespace m2m {

namespace {

double sample_linear(const Grid<double>& g, int c, double px, double py, double pz) {
    const Shape3& sh = g.shape;
    double p[3] = {px, py, pz};
    int x0[3], x1[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
        double v = p[a];
        if (v < 0.0) v = 0.0;
        if (v > double(sh[a] - 1)) v = double(sh[a] - 1);
        int lo = int(std::floor(v));
        if (lo > sh[a] - 1) lo = sh[a] - 1;
        x0[a] = lo;
        x1[a] = lo + 1 <= sh[a] - 1 ? lo + 1 : sh[a] - 1;
        f[a] = v - double(lo);
    }
    const double* d = g.channel(c);
    auto at = [&](int x, int y, int z) { return d[g.vidx(x, y, z)]; };
    double wx1 = f[0], wx0 = 1.0 - wx1;
    double wy1 = f[1], wy0 = 1.0 - wy1;
    double wz1 = f[2], wz0 = 1.0 - wz1;
    double s00 = wx0 * at(x0[0], x0[1], x0[2]) + wx1 * at(x1[0], x0[1], x0[2]);
    double s10 = wx0 * at(x0[0], x1[1], x0[2]) + wx1 * at(x1[0], x1[1], x0[2]);
    double s01 = wx0 * at(x0[0], x0[1], x1[2]) + wx1 * at(x1[0], x0[1], x1[2]);
    double s11 = wx0 * at(x0[0], x1[1], x1[2]) + wx1 * at(x1[0], x1[1], x1[2]);
    return wz0 * (wy0 * s00 + wy1 * s10) + wz1 * (wy0 * s01 + wy1 * s11);
}

int nearest_index(double p, int n) {
    int i = int(std::llround(p));
    if (i < 0) i = 0;
    if (i > n - 1) i = n - 1;
    return i;
}

}  // namespace

void validate_field(const Grid<double>& field) {
    if (field.channels != 3)
        throw std::invalid_argument("displacement field must have 3 channels, got " +
                                    shape_str(field.shape, field.channels));
    for (double v : field.data)
        if (!std::isfinite(v))
            throw std::invalid_argument("displacement field contains a non-finite value");
}

Grid<double> identity_field(Shape3 shape) { return Grid<double>(shape, 3, 0.0); }

Volume warp_image(const Volume& img, const Grid<double>& field, Interp interp) {
    validate_field(field);
    Volume out(field.shape);
    out.spacing = img.spacing;
    out.modality_tag = img.modality_tag;
    const double* ux = field.channel(0);
    const double* uy = field.channel(1);
    const double* uz = field.channel(2);
    std::size_t i = 0;
    for (int z = 0; z < field.nz(); ++z)
        for (int y = 0; y < field.ny(); ++y)
            for (int x = 0; x < field.nx(); ++x, ++i) {
                double px = double(x) + ux[i];
                double py = double(y) + uy[i];
                double pz = double(z) + uz[i];
                if (interp == Interp::Linear) {
                    out.values.data[i] = sample_linear(img.values, 0, px, py, pz);
                } else {
                    out.values.data[i] =
                        img.at(nearest_index(px, img.shape()[0]), nearest_index(py, img.shape()[1]),
                               nearest_index(pz, img.shape()[2]));
                }
            }
    return out;
}

LabelVolume warp_labels(const LabelVolume& labels, const Grid<double>& field) {
    validate_field(field);
    LabelVolume out(field.shape, labels.n_classes);
    const double* ux = field.channel(0);
    const double* uy = field.channel(1);
    const double* uz = field.channel(2);
    std::size_t i = 0;
    for (int z = 0; z < field.nz(); ++z)
        for (int y = 0; y < field.ny(); ++y)
            for (int x = 0; x < field.nx(); ++x, ++i)
                out.data[i] = labels.at(nearest_index(double(x) + ux[i], labels.shape[0]),
                                        nearest_index(double(y) + uy[i], labels.shape[1]),
                                        nearest_index(double(z) + uz[i], labels.shape[2]));
    return out;
}

Grid<double> compose(const Grid<double>& outer, const Grid<double>& inner) {
    validate_field(outer);
    validate_field(inner);
    if (outer.shape != inner.shape)
        throw std::invalid_argument("compose: shape " + shape_str(outer.shape) + " vs " +
                                    shape_str(inner.shape));
    Grid<double> out(inner.shape, 3);
    const double* bx = inner.channel(0);
    const double* by = inner.channel(1);
    const double* bz = inner.channel(2);
    std::size_t i = 0;
    for (int z = 0; z < inner.nz(); ++z)
        for (int y = 0; y < inner.ny(); ++y)
            for (int x = 0; x < inner.nx(); ++x, ++i) {
                double px = double(x) + bx[i];
                double py = double(y) + by[i];
                double pz = double(z) + bz[i];
                for (int c = 0; c < 3; ++c)
                    out.channel(c)[i] =
                        inner.channel(c)[i] + sample_linear(outer, c, px, py, pz);
            }
    return out;
}

Grid<double> jacobian(const Grid<double>& field) {
    validate_field(field);
    const Shape3& sh = field.shape;
    Grid<double> J(sh, 9);
    for (int i = 0; i < 3; ++i) {
        const double* u = field.channel(i);
        for (int j = 0; j < 3; ++j) {
            double* out = J.channel(3 * i + j);
            std::ptrdiff_t st = j == 0 ? 1 : j == 1 ? sh[0] : std::ptrdiff_t(sh[0]) * sh[1];
            int len = sh[j];
            std::size_t k = 0;
            for (int z = 0; z < sh[2]; ++z)
                for (int y = 0; y < sh[1]; ++y)
                    for (int x = 0; x < sh[0]; ++x, ++k) {
                        int q = j == 0 ? x : j == 1 ? y : z;
                        const double* p = u + k;
                        double d;
                        if (len == 1)
                            d = 0.0;
                        else if (q == 0)
                            d = p[st] - p[0];
                        else if (q == len - 1)
                            d = p[0] - p[-st];
                        else
                            d = (p[st] - p[-st]) * 0.5;
                        out[k] = d + (i == j ? 1.0 : 0.0);
                    }
        }
    }
    return J;
}

double neg_jacobian_fraction(const Grid<double>& field) {
    Grid<double> J = jacobian(field);
    std::size_t n = J.voxels(), neg = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double a = J.channel(0)[i], b = J.channel(1)[i], c = J.channel(2)[i];
        double d = J.channel(3)[i], e = J.channel(4)[i], f = J.channel(5)[i];
        double g = J.channel(6)[i], h = J.channel(7)[i], k = J.channel(8)[i];
        double det = a * (e * k - f * h) - b * (d * k - f * g) + c * (d * h - e * g);
        if (det < 0.0) ++neg;
    }
    return double(neg) / double(n);
}

Grid<double> integrate_svf(const Grid<double>& v, int steps) {
    validate_field(v);
    if (steps < 1) throw std::invalid_argument("integrate_svf: steps must be >= 1");
    Grid<double> phi(v.shape, 3);
    double scale = std::ldexp(1.0, -steps);  // 1 / 2^steps
    for (std::size_t i = 0; i < v.data.size(); ++i) phi.data[i] = v.data[i] * scale;
    for (int s = 0; s < steps; ++s) phi = compose(phi, phi);
    return phi;
}

Grid<double> gaussian_smooth(const Grid<double>& grid, double sigma) {
    if (sigma <= 0.0) return grid;
    int r = int(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * r + 1);
    for (int k = -r; k <= r; ++k) kernel[k + r] = std::exp(-0.5 * double(k) * double(k) / (sigma * sigma));

    Grid<double> out = grid;
    const Shape3& sh = grid.shape;
    std::vector<double> tmp(grid.voxels());
    for (int c = 0; c < grid.channels; ++c) {
        double* cur = out.channel(c);
        for (int axis = 0; axis < 3; ++axis) {
            std::ptrdiff_t st = axis == 0 ? 1 : axis == 1 ? sh[0] : std::ptrdiff_t(sh[0]) * sh[1];
            int len = sh[axis];
            std::size_t i = 0;
            for (int z = 0; z < sh[2]; ++z)
                for (int y = 0; y < sh[1]; ++y)
                    for (int x = 0; x < sh[0]; ++x, ++i) {
                        int q = axis == 0 ? x : axis == 1 ? y : z;
                        int lo = q - r < 0 ? -q : -r;
                        int hi = q + r > len - 1 ? len - 1 - q : r;
                        double s = 0.0, wsum = 0.0;
                        const double* p = cur + i;
                        for (int k = lo; k <= hi; ++k) {
                            double w = kernel[k + r];
                            s += w * p[k * st];
                            wsum += w;
                        }
                        tmp[i] = s / wsum;
                    }
            for (std::size_t k = 0; k < tmp.size(); ++k) cur[k] = tmp[k];
        }
    }
    return out;
}

double max_abs(const Grid<double>& grid) {
    double m = 0.0;
    for (double v : grid.data) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace m2m
