#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2m {

using Shape3 = std::array<int, 3>;

inline std::string shape_str(const Shape3& s, int channels = 1) {
    std::string r = "[" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," +
                    std::to_string(s[2]) + "]";
    if (channels != 1) r += "x" + std::to_string(channels);
    return r;
}

// Dense 3D grid with one or more scalar channels. Storage is planar:
// channel-major, then z, y, x with x fastest. A scalar value is represented
// as shape {1,1,1} with one channel.
template <typename T>
struct Grid {
    Shape3 shape{0, 0, 0};
    int channels = 1;
    std::vector<T> data;

    Grid() = default;
    Grid(Shape3 s, int c, T fill = T(0)) : shape(s), channels(c) {
        if (s[0] <= 0 || s[1] <= 0 || s[2] <= 0 || c <= 0)
            throw std::invalid_argument("Grid: non-positive shape " + shape_str(s, c));
        data.assign(std::size_t(s[0]) * s[1] * s[2] * c, fill);
    }

    static Grid scalar(T v) {
        Grid g({1, 1, 1}, 1);
        g.data[0] = v;
        return g;
    }

    int nx() const { return shape[0]; }
    int ny() const { return shape[1]; }
    int nz() const { return shape[2]; }
    std::size_t voxels() const { return std::size_t(shape[0]) * shape[1] * shape[2]; }
    std::size_t size() const { return voxels() * channels; }

    std::size_t vidx(int x, int y, int z) const {
        return std::size_t(x) + std::size_t(shape[0]) * (std::size_t(y) + std::size_t(shape[1]) * z);
    }

    T& at(int c, int x, int y, int z) { return data[std::size_t(c) * voxels() + vidx(x, y, z)]; }
    T at(int c, int x, int y, int z) const { return data[std::size_t(c) * voxels() + vidx(x, y, z)]; }

    T* channel(int c) { return data.data() + std::size_t(c) * voxels(); }
    const T* channel(int c) const { return data.data() + std::size_t(c) * voxels(); }

    bool same_extent(const Grid& o) const { return shape == o.shape && channels == o.channels; }

    template <typename U>
    Grid<U> cast() const {
        Grid<U> g;
        g.shape = shape;
        g.channels = channels;
        g.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) g.data[i] = U(data[i]);
        return g;
    }
};

// Fixed-order pairwise reduction. Used for every sum in the engine so that
// results do not depend on traversal incidentals.
template <typename T>
double pairwise_sum(const T* p, std::size_t n) {
    if (n <= 16) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += double(p[i]);
        return s;
    }
    std::size_t h = n / 2;
    return pairwise_sum(p, h) + pairwise_sum(p + h, n - h);
}

template <typename T>
double pairwise_sum(const std::vector<T>& v) {
    return pairwise_sum(v.data(), v.size());
}

}  // namespace m2m
