#include "m2m/tape/tape.h"

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "m2m/core/rng.h"

namespace m2m {

const char* op_name(OpKind op) {
    switch (op) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::ScalarMul: return "scalar_mul";
        case OpKind::Square: return "square";
        case OpKind::SqrtEps: return "sqrt_eps";
        case OpKind::DivEps: return "div_eps";
        case OpKind::SpatialGradient: return "spatial_gradient";
        case OpKind::BoxMean: return "box_mean";
        case OpKind::WarpLinear: return "warp_linear";
        case OpKind::ReduceMean: return "reduce_mean";
        case OpKind::ReduceSum: return "reduce_sum";
        case OpKind::Stack: return "stack";
        case OpKind::Slice: return "slice";
        case OpKind::Conv3: return "conv3";
        case OpKind::LeakyRelu: return "leaky_relu";
        case OpKind::AvgPool2: return "avg_pool2";
        case OpKind::ResizeLinear: return "resize_linear";
        case OpKind::BroadcastAdd: return "broadcast_add";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string("tape: ") + op + ": " + detail);
}

// Sum of in over the window [c-r, c+r] clipped to the axis, written per voxel.
template <typename T>
void box_sum_axis(const T* in, T* out, int nx, int ny, int nz, int axis, int r) {
    std::ptrdiff_t st = axis == 0 ? 1 : axis == 1 ? nx : std::ptrdiff_t(nx) * ny;
    int n = axis == 0 ? nx : axis == 1 ? ny : nz;
    std::size_t i = 0;
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x, ++i) {
                int c = axis == 0 ? x : axis == 1 ? y : z;
                int lo = c - r < 0 ? -c : -r;
                int hi = c + r > n - 1 ? n - 1 - c : r;
                const T* p = in + i;
                T s = T(0);
                for (int k = lo; k <= hi; ++k) s += p[k * st];
                out[i] = s;
            }
}

inline int window_count(int c, int n, int r) {
    int lo = c - r < 0 ? 0 : c - r;
    int hi = c + r > n - 1 ? n - 1 : c + r;
    return hi - lo + 1;
}

// Trilinear sample context at one position, shared by warp value and adjoints.
struct SampleCtx {
    int x0[3], x1[3];
    double f[3];
    bool clamped[3];  // position fell outside [0, n-1] on this axis
};

inline SampleCtx make_sample(const double p[3], const Shape3& sh) {
    SampleCtx s;
    for (int a = 0; a < 3; ++a) {
        double c = p[a];
        s.clamped[a] = c < 0.0 || c > double(sh[a] - 1);
        if (c < 0.0) c = 0.0;
        if (c > double(sh[a] - 1)) c = double(sh[a] - 1);
        double fl = std::floor(c);
        int x0 = int(fl);
        if (x0 > sh[a] - 1) x0 = sh[a] - 1;
        s.x0[a] = x0;
        s.x1[a] = x0 + 1 <= sh[a] - 1 ? x0 + 1 : sh[a] - 1;
        s.f[a] = c - double(x0);
    }
    return s;
}

}  // namespace

template <typename T>
int Tape<T>::check(NodeId id) const {
    if (id < 0 || id >= int(nodes_.size()))
        throw std::logic_error("tape: node id " + std::to_string(id) + " out of range");
    return id;
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::push(Node n) {
    if (n.op != OpKind::Leaf) {
        n.needs_grad = false;
        for (NodeId in : n.inputs) n.needs_grad = n.needs_grad || nodes_[check(in)].needs_grad;
    }
    nodes_.push_back(std::move(n));
    forward_root_ = -1;
    return NodeId(nodes_.size() - 1);
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::leaf(Grid<T> value, bool requires_grad) {
    if (value.data.empty()) shape_error("leaf", "empty grid");
    Node n;
    n.op = OpKind::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.needs_grad = requires_grad;
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::add(NodeId a, NodeId b) {
    const Grid<T>& va = nodes_[check(a)].value;
    const Grid<T>& vb = nodes_[check(b)].value;
    if (!va.same_extent(vb))
        shape_error("add", "shape " + shape_str(va.shape, va.channels) + " vs " +
                               shape_str(vb.shape, vb.channels));
    Node n;
    n.op = OpKind::Add;
    n.inputs = {a, b};
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::sub(NodeId a, NodeId b) {
    const Grid<T>& va = nodes_[check(a)].value;
    const Grid<T>& vb = nodes_[check(b)].value;
    if (!va.same_extent(vb))
        shape_error("sub", "shape " + shape_str(va.shape, va.channels) + " vs " +
                               shape_str(vb.shape, vb.channels));
    Node n;
    n.op = OpKind::Sub;
    n.inputs = {a, b};
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::mul(NodeId a, NodeId b) {
    const Grid<T>& va = nodes_[check(a)].value;
    const Grid<T>& vb = nodes_[check(b)].value;
    if (!va.same_extent(vb))
        shape_error("mul", "shape " + shape_str(va.shape, va.channels) + " vs " +
                               shape_str(vb.shape, vb.channels));
    Node n;
    n.op = OpKind::Mul;
    n.inputs = {a, b};
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::scalar_mul(NodeId a, double s) {
    const Grid<T>& va = nodes_[check(a)].value;
    Node n;
    n.op = OpKind::ScalarMul;
    n.inputs = {a};
    n.attr = s;
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::square(NodeId a) {
    const Grid<T>& va = nodes_[check(a)].value;
    Node n;
    n.op = OpKind::Square;
    n.inputs = {a};
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::sqrt_eps(NodeId a, double eps) {
    const Grid<T>& va = nodes_[check(a)].value;
    Node n;
    n.op = OpKind::SqrtEps;
    n.inputs = {a};
    n.attr = eps;
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::div_eps(NodeId a, NodeId b, double eps) {
    const Grid<T>& va = nodes_[check(a)].value;
    const Grid<T>& vb = nodes_[check(b)].value;
    if (!va.same_extent(vb))
        shape_error("div_eps", "shape " + shape_str(va.shape, va.channels) + " vs " +
                                   shape_str(vb.shape, vb.channels));
    Node n;
    n.op = OpKind::DivEps;
    n.inputs = {a, b};
    n.attr = eps;
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::spatial_gradient(NodeId a) {
    const Grid<T>& va = nodes_[check(a)].value;
    Node n;
    n.op = OpKind::SpatialGradient;
    n.inputs = {a};
    n.value = Grid<T>(va.shape, 3 * va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::box_mean(NodeId a, int radius) {
    if (radius < 1) shape_error("box_mean", "radius must be >= 1");
    const Grid<T>& va = nodes_[check(a)].value;
    Node n;
    n.op = OpKind::BoxMean;
    n.inputs = {a};
    n.i0 = radius;
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::warp_linear(NodeId img, NodeId field) {
    const Grid<T>& vi = nodes_[check(img)].value;
    const Grid<T>& vf = nodes_[check(field)].value;
    if (vf.channels != 3)
        shape_error("warp_linear", "field must have 3 channels, got " +
                                       shape_str(vf.shape, vf.channels));
    Node n;
    n.op = OpKind::WarpLinear;
    n.inputs = {img, field};
    n.value = Grid<T>(vf.shape, vi.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::reduce_mean(NodeId a) {
    check(a);
    Node n;
    n.op = OpKind::ReduceMean;
    n.inputs = {a};
    n.value = Grid<T>({1, 1, 1}, 1);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::reduce_sum(NodeId a) {
    check(a);
    Node n;
    n.op = OpKind::ReduceSum;
    n.inputs = {a};
    n.value = Grid<T>({1, 1, 1}, 1);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::stack(const std::vector<NodeId>& parts) {
    if (parts.empty()) shape_error("stack", "no inputs");
    const Grid<T>& first = nodes_[check(parts[0])].value;
    int channels = 0;
    for (NodeId id : parts) {
        const Grid<T>& v = nodes_[check(id)].value;
        if (v.shape != first.shape)
            shape_error("stack", "shape " + shape_str(v.shape) + " vs " + shape_str(first.shape));
        channels += v.channels;
    }
    Node n;
    n.op = OpKind::Stack;
    n.inputs = parts;
    n.value = Grid<T>(first.shape, channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::slice(NodeId a, int first_channel, int n_channels) {
    const Grid<T>& va = nodes_[check(a)].value;
    if (first_channel < 0 || n_channels < 1 || first_channel + n_channels > va.channels)
        shape_error("slice", "channels [" + std::to_string(first_channel) + "," +
                                 std::to_string(first_channel + n_channels) + ") out of " +
                                 std::to_string(va.channels));
    Node n;
    n.op = OpKind::Slice;
    n.inputs = {a};
    n.i0 = first_channel;
    n.i1 = n_channels;
    n.value = Grid<T>(va.shape, n_channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::conv3(NodeId input, NodeId weight, int c_out) {
    const Grid<T>& vi = nodes_[check(input)].value;
    const Grid<T>& vw = nodes_[check(weight)].value;
    if (vw.shape != Shape3{3, 3, 3})
        shape_error("conv3", "weight grid must be 3x3x3, got " + shape_str(vw.shape, vw.channels));
    if (c_out < 1 || vw.channels != c_out * vi.channels)
        shape_error("conv3", "weight has " + std::to_string(vw.channels) + " kernels, expected " +
                                 std::to_string(c_out) + "x" + std::to_string(vi.channels));
    Node n;
    n.op = OpKind::Conv3;
    n.inputs = {input, weight};
    n.i0 = c_out;
    n.value = Grid<T>(vi.shape, c_out);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::leaky_relu(NodeId a, double slope) {
    const Grid<T>& va = nodes_[check(a)].value;
    Node n;
    n.op = OpKind::LeakyRelu;
    n.inputs = {a};
    n.attr = slope;
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::avg_pool2(NodeId a) {
    const Grid<T>& va = nodes_[check(a)].value;
    for (int ax = 0; ax < 3; ++ax)
        if (va.shape[ax] % 2 != 0)
            shape_error("avg_pool2", "odd extent " + shape_str(va.shape));
    Node n;
    n.op = OpKind::AvgPool2;
    n.inputs = {a};
    n.value = Grid<T>({va.shape[0] / 2, va.shape[1] / 2, va.shape[2] / 2}, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::resize_linear(NodeId a, Shape3 target) {
    const Grid<T>& va = nodes_[check(a)].value;
    if (target[0] < 1 || target[1] < 1 || target[2] < 1)
        shape_error("resize_linear", "bad target " + shape_str(target));
    Node n;
    n.op = OpKind::ResizeLinear;
    n.inputs = {a};
    n.i0 = target[0];
    n.i1 = target[1];
    n.i2 = target[2];
    n.value = Grid<T>(target, va.channels);
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::NodeId Tape<T>::broadcast_add(NodeId a, NodeId b) {
    const Grid<T>& va = nodes_[check(a)].value;
    const Grid<T>& vb = nodes_[check(b)].value;
    if (vb.shape != Shape3{1, 1, 1} || vb.channels != va.channels)
        shape_error("broadcast_add", "bias must be {1,1,1}x" + std::to_string(va.channels) +
                                         ", got " + shape_str(vb.shape, vb.channels));
    Node n;
    n.op = OpKind::BroadcastAdd;
    n.inputs = {a, b};
    n.value = Grid<T>(va.shape, va.channels);
    return push(std::move(n));
}

template <typename T>
void Tape<T>::eval(Node& n) {
    const Grid<T>& A = n.inputs.size() > 0 ? nodes_[n.inputs[0]].value : n.value;
    switch (n.op) {
        case OpKind::Leaf: break;
        case OpKind::Add: {
            const Grid<T>& B = nodes_[n.inputs[1]].value;
            for (std::size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] + B.data[i];
            break;
        }
        case OpKind::Sub: {
            const Grid<T>& B = nodes_[n.inputs[1]].value;
            for (std::size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] - B.data[i];
            break;
        }
        case OpKind::Mul: {
            const Grid<T>& B = nodes_[n.inputs[1]].value;
            for (std::size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] * B.data[i];
            break;
        }
        case OpKind::ScalarMul: {
            T s = T(n.attr);
            for (std::size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = s * A.data[i];
            break;
        }
        case OpKind::Square: {
            for (std::size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] * A.data[i];
            break;
        }
        case OpKind::SqrtEps: {
            T e = T(n.attr);
            for (std::size_t i = 0; i < A.data.size(); ++i)
                n.value.data[i] = std::sqrt(A.data[i] + e);
            break;
        }
        case OpKind::DivEps: {
            const Grid<T>& B = nodes_[n.inputs[1]].value;
            T e = T(n.attr);
            for (std::size_t i = 0; i < A.data.size(); ++i)
                n.value.data[i] = A.data[i] / (B.data[i] + e);
            break;
        }
        case OpKind::SpatialGradient: {
            int nx = A.nx(), ny = A.ny(), nz = A.nz();
            for (int c = 0; c < A.channels; ++c) {
                const T* in = A.channel(c);
                for (int axis = 0; axis < 3; ++axis) {
                    T* out = n.value.channel(axis * A.channels + c);
                    std::ptrdiff_t st = axis == 0 ? 1 : axis == 1 ? nx : std::ptrdiff_t(nx) * ny;
                    int len = axis == 0 ? nx : axis == 1 ? ny : nz;
                    std::size_t i = 0;
                    for (int z = 0; z < nz; ++z)
                        for (int y = 0; y < ny; ++y)
                            for (int x = 0; x < nx; ++x, ++i) {
                                int q = axis == 0 ? x : axis == 1 ? y : z;
                                const T* p = in + i;
                                if (len == 1)
                                    out[i] = T(0);
                                else if (q == 0)
                                    out[i] = p[st] - p[0];
                                else if (q == len - 1)
                                    out[i] = p[0] - p[-st];
                                else
                                    out[i] = (p[st] - p[-st]) * T(0.5);
                            }
                }
            }
            break;
        }
        case OpKind::BoxMean: {
            int r = n.i0;
            int nx = A.nx(), ny = A.ny(), nz = A.nz();
            std::vector<T> tmp(A.voxels()), tmp2(A.voxels());
            for (int c = 0; c < A.channels; ++c) {
                box_sum_axis(A.channel(c), tmp.data(), nx, ny, nz, 0, r);
                box_sum_axis(tmp.data(), tmp2.data(), nx, ny, nz, 1, r);
                box_sum_axis(tmp2.data(), tmp.data(), nx, ny, nz, 2, r);
                T* out = n.value.channel(c);
                std::size_t i = 0;
                for (int z = 0; z < nz; ++z) {
                    int cz = window_count(z, nz, r);
                    for (int y = 0; y < ny; ++y) {
                        int cyz = window_count(y, ny, r) * cz;
                        for (int x = 0; x < nx; ++x, ++i)
                            out[i] = tmp[i] / T(window_count(x, nx, r) * cyz);
                    }
                }
            }
            break;
        }
        case OpKind::WarpLinear: {
            const Grid<T>& U = nodes_[n.inputs[1]].value;
            const Shape3& ish = A.shape;
            const T* ux = U.channel(0);
            const T* uy = U.channel(1);
            const T* uz = U.channel(2);
            std::size_t i = 0;
            for (int z = 0; z < U.nz(); ++z)
                for (int y = 0; y < U.ny(); ++y)
                    for (int x = 0; x < U.nx(); ++x, ++i) {
                        double p[3] = {double(x) + double(ux[i]), double(y) + double(uy[i]),
                                       double(z) + double(uz[i])};
                        SampleCtx s = make_sample(p, ish);
                        double wx1 = s.f[0], wx0 = 1.0 - wx1;
                        double wy1 = s.f[1], wy0 = 1.0 - wy1;
                        double wz1 = s.f[2], wz0 = 1.0 - wz1;
                        for (int c = 0; c < A.channels; ++c) {
                            const T* img = A.channel(c);
                            auto v = [&](int xx, int yy, int zz) {
                                return double(img[A.vidx(xx, yy, zz)]);
                            };
                            double s00 = wx0 * v(s.x0[0], s.x0[1], s.x0[2]) +
                                         wx1 * v(s.x1[0], s.x0[1], s.x0[2]);
                            double s10 = wx0 * v(s.x0[0], s.x1[1], s.x0[2]) +
                                         wx1 * v(s.x1[0], s.x1[1], s.x0[2]);
                            double s01 = wx0 * v(s.x0[0], s.x0[1], s.x1[2]) +
                                         wx1 * v(s.x1[0], s.x0[1], s.x1[2]);
                            double s11 = wx0 * v(s.x0[0], s.x1[1], s.x1[2]) +
                                         wx1 * v(s.x1[0], s.x1[1], s.x1[2]);
                            double sy0 = wy0 * s00 + wy1 * s10;
                            double sy1 = wy0 * s01 + wy1 * s11;
                            n.value.channel(c)[i] = T(wz0 * sy0 + wz1 * sy1);
                        }
                    }
            break;
        }
        case OpKind::ReduceMean: {
            n.value.data[0] = T(pairwise_sum(A.data) / double(A.data.size()));
            break;
        }
        case OpKind::ReduceSum: {
            n.value.data[0] = T(pairwise_sum(A.data));
            break;
        }
        case OpKind::Stack: {
            int c0 = 0;
            for (NodeId id : n.inputs) {
                const Grid<T>& part = nodes_[id].value;
                for (int c = 0; c < part.channels; ++c) {
                    const T* src = part.channel(c);
                    T* dst = n.value.channel(c0 + c);
                    for (std::size_t i = 0; i < part.voxels(); ++i) dst[i] = src[i];
                }
                c0 += part.channels;
            }
            break;
        }
        case OpKind::Slice: {
            for (int c = 0; c < n.i1; ++c) {
                const T* src = A.channel(n.i0 + c);
                T* dst = n.value.channel(c);
                for (std::size_t i = 0; i < A.voxels(); ++i) dst[i] = src[i];
            }
            break;
        }
        case OpKind::Conv3: {
            const Grid<T>& W = nodes_[n.inputs[1]].value;
            int c_in = A.channels, c_out = n.i0;
            int nx = A.nx(), ny = A.ny(), nz = A.nz();
            std::fill(n.value.data.begin(), n.value.data.end(), T(0));
            for (int o = 0; o < c_out; ++o) {
                T* out = n.value.channel(o);
                for (int ic = 0; ic < c_in; ++ic) {
                    const T* in = A.channel(ic);
                    const T* w = W.channel(o * c_in + ic);
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                T wv = w[(dx + 1) + 3 * ((dy + 1) + 3 * (dz + 1))];
                                int zlo = dz < 0 ? -dz : 0, zhi = dz > 0 ? nz - 1 - dz : nz - 1;
                                int ylo = dy < 0 ? -dy : 0, yhi = dy > 0 ? ny - 1 - dy : ny - 1;
                                int xlo = dx < 0 ? -dx : 0, xhi = dx > 0 ? nx - 1 - dx : nx - 1;
                                for (int z = zlo; z <= zhi; ++z)
                                    for (int y = ylo; y <= yhi; ++y) {
                                        T* orow = out + A.vidx(0, y, z);
                                        const T* irow = in + A.vidx(dx, y + dy, z + dz);
                                        for (int x = xlo; x <= xhi; ++x) orow[x] += wv * irow[x];
                                    }
                            }
                }
            }
            break;
        }
        case OpKind::LeakyRelu: {
            T s = T(n.attr);
            for (std::size_t i = 0; i < A.data.size(); ++i) {
                T x = A.data[i];
                n.value.data[i] = x > T(0) ? x : s * x;
            }
            break;
        }
        case OpKind::AvgPool2: {
            int ox = n.value.nx(), oy = n.value.ny(), oz = n.value.nz();
            for (int c = 0; c < A.channels; ++c) {
                const T* in = A.channel(c);
                T* out = n.value.channel(c);
                std::size_t i = 0;
                for (int z = 0; z < oz; ++z)
                    for (int y = 0; y < oy; ++y)
                        for (int x = 0; x < ox; ++x, ++i) {
                            T s = T(0);
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx)
                                        s += in[A.vidx(2 * x + dx, 2 * y + dy, 2 * z + dz)];
                            out[i] = s * T(0.125);
                        }
            }
            break;
        }
        case OpKind::ResizeLinear: {
            const Shape3& ish = A.shape;
            std::size_t i = 0;
            for (int z = 0; z < n.value.nz(); ++z)
                for (int y = 0; y < n.value.ny(); ++y)
                    for (int x = 0; x < n.value.nx(); ++x, ++i) {
                        double p[3] = {
                            (double(x) + 0.5) * double(ish[0]) / double(n.value.nx()) - 0.5,
                            (double(y) + 0.5) * double(ish[1]) / double(n.value.ny()) - 0.5,
                            (double(z) + 0.5) * double(ish[2]) / double(n.value.nz()) - 0.5};
                        SampleCtx s = make_sample(p, ish);
                        double wx1 = s.f[0], wx0 = 1.0 - wx1;
                        double wy1 = s.f[1], wy0 = 1.0 - wy1;
                        double wz1 = s.f[2], wz0 = 1.0 - wz1;
                        for (int c = 0; c < A.channels; ++c) {
                            const T* img = A.channel(c);
                            auto v = [&](int xx, int yy, int zz) {
                                return double(img[A.vidx(xx, yy, zz)]);
                            };
                            double sy0 = wy0 * (wx0 * v(s.x0[0], s.x0[1], s.x0[2]) +
                                                wx1 * v(s.x1[0], s.x0[1], s.x0[2])) +
                                         wy1 * (wx0 * v(s.x0[0], s.x1[1], s.x0[2]) +
                                                wx1 * v(s.x1[0], s.x1[1], s.x0[2]));
                            double sy1 = wy0 * (wx0 * v(s.x0[0], s.x0[1], s.x1[2]) +
                                                wx1 * v(s.x1[0], s.x0[1], s.x1[2])) +
                                         wy1 * (wx0 * v(s.x0[0], s.x1[1], s.x1[2]) +
                                                wx1 * v(s.x1[0], s.x1[1], s.x1[2]));
                            n.value.channel(c)[i] = T(wz0 * sy0 + wz1 * sy1);
                        }
                    }
            break;
        }
        case OpKind::BroadcastAdd: {
            const Grid<T>& B = nodes_[n.inputs[1]].value;
            for (int c = 0; c < A.channels; ++c) {
                const T* in = A.channel(c);
                T* out = n.value.channel(c);
                T b = B.data[c];
                for (std::size_t i = 0; i < A.voxels(); ++i) out[i] = in[i] + b;
            }
            break;
        }
    }
}

template <typename T>
Grid<T>& Tape<T>::grad_buf(NodeId id) {
    return nodes_[id].grad;
}

template <typename T>
void Tape<T>::adjoint(Node& n) {
    const Grid<T>& g = n.grad;
    bool wantA = !n.inputs.empty() && nodes_[n.inputs[0]].needs_grad;
    bool wantB = n.inputs.size() > 1 && nodes_[n.inputs[1]].needs_grad;
    const Grid<T>& A = n.inputs.size() > 0 ? nodes_[n.inputs[0]].value : n.value;
    switch (n.op) {
        case OpKind::Leaf: break;
        case OpKind::Add: {
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (wantB) {
                Grid<T>& gb = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
            }
            break;
        }
        case OpKind::Sub: {
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (wantB) {
                Grid<T>& gb = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
            }
            break;
        }
        case OpKind::Mul: {
            const Grid<T>& B = nodes_[n.inputs[1]].value;
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    ga.data[i] += g.data[i] * B.data[i];
            }
            if (wantB) {
                Grid<T>& gb = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    gb.data[i] += g.data[i] * A.data[i];
            }
            break;
        }
        case OpKind::ScalarMul: {
            if (wantA) {
                T s = T(n.attr);
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
            }
            break;
        }
        case OpKind::Square: {
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    ga.data[i] += T(2) * A.data[i] * g.data[i];
            }
            break;
        }
        case OpKind::SqrtEps: {
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    ga.data[i] += g.data[i] * T(0.5) / n.value.data[i];
            }
            break;
        }
        case OpKind::DivEps: {
            const Grid<T>& B = nodes_[n.inputs[1]].value;
            T e = T(n.attr);
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    ga.data[i] += g.data[i] / (B.data[i] + e);
            }
            if (wantB) {
                Grid<T>& gb = grad_buf(n.inputs[1]);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    T d = B.data[i] + e;
                    gb.data[i] -= g.data[i] * A.data[i] / (d * d);
                }
            }
            break;
        }
        case OpKind::SpatialGradient: {
            if (!wantA) break;
            Grid<T>& ga = grad_buf(n.inputs[0]);
            int nx = A.nx(), ny = A.ny(), nz = A.nz();
            for (int c = 0; c < A.channels; ++c) {
                T* gin = ga.channel(c);
                for (int axis = 0; axis < 3; ++axis) {
                    const T* gout = g.channel(axis * A.channels + c);
                    std::ptrdiff_t st = axis == 0 ? 1 : axis == 1 ? nx : std::ptrdiff_t(nx) * ny;
                    int len = axis == 0 ? nx : axis == 1 ? ny : nz;
                    if (len == 1) continue;
                    std::size_t i = 0;
                    for (int z = 0; z < nz; ++z)
                        for (int y = 0; y < ny; ++y)
                            for (int x = 0; x < nx; ++x, ++i) {
                                int q = axis == 0 ? x : axis == 1 ? y : z;
                                T* p = gin + i;
                                T gv = gout[i];
                                if (q == 0) {
                                    p[st] += gv;
                                    p[0] -= gv;
                                } else if (q == len - 1) {
                                    p[0] += gv;
                                    p[-st] -= gv;
                                } else {
                                    p[st] += gv * T(0.5);
                                    p[-st] -= gv * T(0.5);
                                }
                            }
                }
            }
            break;
        }
        case OpKind::BoxMean: {
            if (!wantA) break;
            Grid<T>& ga = grad_buf(n.inputs[0]);
            int r = n.i0;
            int nx = A.nx(), ny = A.ny(), nz = A.nz();
            std::vector<T> tmp(A.voxels()), tmp2(A.voxels());
            for (int c = 0; c < A.channels; ++c) {
                const T* gout = g.channel(c);
                std::size_t i = 0;
                for (int z = 0; z < nz; ++z) {
                    int cz = window_count(z, nz, r);
                    for (int y = 0; y < ny; ++y) {
                        int cyz = window_count(y, ny, r) * cz;
                        for (int x = 0; x < nx; ++x, ++i)
                            tmp[i] = gout[i] / T(window_count(x, nx, r) * cyz);
                    }
                }
                box_sum_axis(tmp.data(), tmp2.data(), nx, ny, nz, 0, r);
                box_sum_axis(tmp2.data(), tmp.data(), nx, ny, nz, 1, r);
                box_sum_axis(tmp.data(), tmp2.data(), nx, ny, nz, 2, r);
                T* gin = ga.channel(c);
                for (std::size_t k = 0; k < A.voxels(); ++k) gin[k] += tmp2[k];
            }
            break;
        }
        case OpKind::WarpLinear: {
            const Grid<T>& U = nodes_[n.inputs[1]].value;
            const Shape3& ish = A.shape;
            const T* ux = U.channel(0);
            const T* uy = U.channel(1);
            const T* uz = U.channel(2);
            Grid<T>* gimg = wantA ? &grad_buf(n.inputs[0]) : nullptr;
            Grid<T>* gfield = wantB ? &grad_buf(n.inputs[1]) : nullptr;
            std::size_t i = 0;
            for (int z = 0; z < U.nz(); ++z)
                for (int y = 0; y < U.ny(); ++y)
                    for (int x = 0; x < U.nx(); ++x, ++i) {
                        double p[3] = {double(x) + double(ux[i]), double(y) + double(uy[i]),
                                       double(z) + double(uz[i])};
                        SampleCtx s = make_sample(p, ish);
                        double wx1 = s.f[0], wx0 = 1.0 - wx1;
                        double wy1 = s.f[1], wy0 = 1.0 - wy1;
                        double wz1 = s.f[2], wz0 = 1.0 - wz1;
                        double dpos[3] = {0.0, 0.0, 0.0};
                        for (int c = 0; c < A.channels; ++c) {
                            double gv = double(g.channel(c)[i]);
                            const T* img = A.channel(c);
                            auto v = [&](int xx, int yy, int zz) {
                                return double(img[A.vidx(xx, yy, zz)]);
                            };
                            double v000 = v(s.x0[0], s.x0[1], s.x0[2]);
                            double v100 = v(s.x1[0], s.x0[1], s.x0[2]);
                            double v010 = v(s.x0[0], s.x1[1], s.x0[2]);
                            double v110 = v(s.x1[0], s.x1[1], s.x0[2]);
                            double v001 = v(s.x0[0], s.x0[1], s.x1[2]);
                            double v101 = v(s.x1[0], s.x0[1], s.x1[2]);
                            double v011 = v(s.x0[0], s.x1[1], s.x1[2]);
                            double v111 = v(s.x1[0], s.x1[1], s.x1[2]);
                            if (gimg) {
                                T* gi = gimg->channel(c);
                                gi[A.vidx(s.x0[0], s.x0[1], s.x0[2])] += T(gv * wx0 * wy0 * wz0);
                                gi[A.vidx(s.x1[0], s.x0[1], s.x0[2])] += T(gv * wx1 * wy0 * wz0);
                                gi[A.vidx(s.x0[0], s.x1[1], s.x0[2])] += T(gv * wx0 * wy1 * wz0);
                                gi[A.vidx(s.x1[0], s.x1[1], s.x0[2])] += T(gv * wx1 * wy1 * wz0);
                                gi[A.vidx(s.x0[0], s.x0[1], s.x1[2])] += T(gv * wx0 * wy0 * wz1);
                                gi[A.vidx(s.x1[0], s.x0[1], s.x1[2])] += T(gv * wx1 * wy0 * wz1);
                                gi[A.vidx(s.x0[0], s.x1[1], s.x1[2])] += T(gv * wx0 * wy1 * wz1);
                                gi[A.vidx(s.x1[0], s.x1[1], s.x1[2])] += T(gv * wx1 * wy1 * wz1);
                            }
                            if (gfield) {
                                dpos[0] += gv * (wy0 * wz0 * (v100 - v000) + wy1 * wz0 * (v110 - v010) +
                                                 wy0 * wz1 * (v101 - v001) + wy1 * wz1 * (v111 - v011));
                                dpos[1] += gv * (wx0 * wz0 * (v010 - v000) + wx1 * wz0 * (v110 - v100) +
                                                 wx0 * wz1 * (v011 - v001) + wx1 * wz1 * (v111 - v101));
                                dpos[2] += gv * (wx0 * wy0 * (v001 - v000) + wx1 * wy0 * (v101 - v100) +
                                                 wx0 * wy1 * (v011 - v010) + wx1 * wy1 * (v111 - v110));
                            }
                        }
                        if (gfield)
                            for (int a = 0; a < 3; ++a)
                                if (!s.clamped[a]) gfield->channel(a)[i] += T(dpos[a]);
                    }
            break;
        }
        case OpKind::ReduceMean: {
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                T gv = g.data[0] / T(double(A.data.size()));
                for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += gv;
            }
            break;
        }
        case OpKind::ReduceSum: {
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                T gv = g.data[0];
                for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += gv;
            }
            break;
        }
        case OpKind::Stack: {
            int c0 = 0;
            for (NodeId id : n.inputs) {
                const Grid<T>& part = nodes_[id].value;
                if (nodes_[id].needs_grad) {
                    Grid<T>& gp = grad_buf(id);
                    for (int c = 0; c < part.channels; ++c) {
                        const T* src = g.channel(c0 + c);
                        T* dst = gp.channel(c);
                        for (std::size_t i = 0; i < part.voxels(); ++i) dst[i] += src[i];
                    }
                }
                c0 += part.channels;
            }
            break;
        }
        case OpKind::Slice: {
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (int c = 0; c < n.i1; ++c) {
                    const T* src = g.channel(c);
                    T* dst = ga.channel(n.i0 + c);
                    for (std::size_t i = 0; i < A.voxels(); ++i) dst[i] += src[i];
                }
            }
            break;
        }
        case OpKind::Conv3: {
            const Grid<T>& W = nodes_[n.inputs[1]].value;
            int c_in = A.channels, c_out = n.i0;
            int nx = A.nx(), ny = A.ny(), nz = A.nz();
            // Two dedicated passes (input gradient, then weight gradient) so
            // each inner row loop is a straight-line axpy / dot the compiler
            // can vectorize; the fused form was ~5x slower than forward.
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (int o = 0; o < c_out; ++o) {
                    const T* gout = g.channel(o);
                    for (int ic = 0; ic < c_in; ++ic) {
                        const T* w = W.channel(o * c_in + ic);
                        T* gin = ga.channel(ic);
                        for (int dz = -1; dz <= 1; ++dz)
                            for (int dy = -1; dy <= 1; ++dy)
                                for (int dx = -1; dx <= 1; ++dx) {
                                    T wv = w[(dx + 1) + 3 * ((dy + 1) + 3 * (dz + 1))];
                                    int zlo = dz < 0 ? -dz : 0, zhi = dz > 0 ? nz - 1 - dz : nz - 1;
                                    int ylo = dy < 0 ? -dy : 0, yhi = dy > 0 ? ny - 1 - dy : ny - 1;
                                    int xlo = dx < 0 ? -dx : 0, xhi = dx > 0 ? nx - 1 - dx : nx - 1;
                                    for (int z = zlo; z <= zhi; ++z)
                                        for (int y = ylo; y <= yhi; ++y) {
                                            const T* grow = gout + A.vidx(0, y, z);
                                            T* girow = gin + A.vidx(dx, y + dy, z + dz);
                                            for (int x = xlo; x <= xhi; ++x)
                                                girow[x] += wv * grow[x];
                                        }
                                }
                    }
                }
            }
            if (wantB) {
                Grid<T>& gb = grad_buf(n.inputs[1]);
                for (int o = 0; o < c_out; ++o) {
                    const T* gout = g.channel(o);
                    for (int ic = 0; ic < c_in; ++ic) {
                        const T* in = A.channel(ic);
                        T* gw = gb.channel(o * c_in + ic);
                        for (int dz = -1; dz <= 1; ++dz)
                            for (int dy = -1; dy <= 1; ++dy)
                                for (int dx = -1; dx <= 1; ++dx) {
                                    int zlo = dz < 0 ? -dz : 0, zhi = dz > 0 ? nz - 1 - dz : nz - 1;
                                    int ylo = dy < 0 ? -dy : 0, yhi = dy > 0 ? ny - 1 - dy : ny - 1;
                                    int xlo = dx < 0 ? -dx : 0, xhi = dx > 0 ? nx - 1 - dx : nx - 1;
                                    double wacc = 0.0;
                                    for (int z = zlo; z <= zhi; ++z)
                                        for (int y = ylo; y <= yhi; ++y) {
                                            const T* grow = gout + A.vidx(0, y, z);
                                            const T* irow = in + A.vidx(dx, y + dy, z + dz);
                                            T racc = T(0);
                                            for (int x = xlo; x <= xhi; ++x)
                                                racc += grow[x] * irow[x];
                                            wacc += double(racc);
                                        }
                                    gw[(dx + 1) + 3 * ((dy + 1) + 3 * (dz + 1))] += T(wacc);
                                }
                    }
                }
            }
            break;
        }
        case OpKind::LeakyRelu: {
            if (wantA) {
                T s = T(n.attr);
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    ga.data[i] += g.data[i] * (A.data[i] > T(0) ? T(1) : s);
            }
            break;
        }
        case OpKind::AvgPool2: {
            if (!wantA) break;
            Grid<T>& ga = grad_buf(n.inputs[0]);
            int ox = n.value.nx(), oy = n.value.ny(), oz = n.value.nz();
            for (int c = 0; c < A.channels; ++c) {
                const T* gout = g.channel(c);
                T* gin = ga.channel(c);
                std::size_t i = 0;
                for (int z = 0; z < oz; ++z)
                    for (int y = 0; y < oy; ++y)
                        for (int x = 0; x < ox; ++x, ++i) {
                            T gv = gout[i] * T(0.125);
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx)
                                        gin[A.vidx(2 * x + dx, 2 * y + dy, 2 * z + dz)] += gv;
                        }
            }
            break;
        }
        case OpKind::ResizeLinear: {
            if (!wantA) break;
            Grid<T>& ga = grad_buf(n.inputs[0]);
            const Shape3& ish = A.shape;
            std::size_t i = 0;
            for (int z = 0; z < n.value.nz(); ++z)
                for (int y = 0; y < n.value.ny(); ++y)
                    for (int x = 0; x < n.value.nx(); ++x, ++i) {
                        double p[3] = {
                            (double(x) + 0.5) * double(ish[0]) / double(n.value.nx()) - 0.5,
                            (double(y) + 0.5) * double(ish[1]) / double(n.value.ny()) - 0.5,
                            (double(z) + 0.5) * double(ish[2]) / double(n.value.nz()) - 0.5};
                        SampleCtx s = make_sample(p, ish);
                        double wx1 = s.f[0], wx0 = 1.0 - wx1;
                        double wy1 = s.f[1], wy0 = 1.0 - wy1;
                        double wz1 = s.f[2], wz0 = 1.0 - wz1;
                        for (int c = 0; c < A.channels; ++c) {
                            double gv = double(g.channel(c)[i]);
                            T* gi = ga.channel(c);
                            gi[A.vidx(s.x0[0], s.x0[1], s.x0[2])] += T(gv * wx0 * wy0 * wz0);
                            gi[A.vidx(s.x1[0], s.x0[1], s.x0[2])] += T(gv * wx1 * wy0 * wz0);
                            gi[A.vidx(s.x0[0], s.x1[1], s.x0[2])] += T(gv * wx0 * wy1 * wz0);
                            gi[A.vidx(s.x1[0], s.x1[1], s.x0[2])] += T(gv * wx1 * wy1 * wz0);
                            gi[A.vidx(s.x0[0], s.x0[1], s.x1[2])] += T(gv * wx0 * wy0 * wz1);
                            gi[A.vidx(s.x1[0], s.x0[1], s.x1[2])] += T(gv * wx1 * wy0 * wz1);
                            gi[A.vidx(s.x0[0], s.x1[1], s.x1[2])] += T(gv * wx0 * wy1 * wz1);
                            gi[A.vidx(s.x1[0], s.x1[1], s.x1[2])] += T(gv * wx1 * wy1 * wz1);
                        }
                    }
            break;
        }
        case OpKind::BroadcastAdd: {
            if (wantA) {
                Grid<T>& ga = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (wantB) {
                Grid<T>& gb = grad_buf(n.inputs[1]);
                for (int c = 0; c < g.channels; ++c)
                    gb.data[c] += T(pairwise_sum(g.channel(c), g.voxels()));
            }
            break;
        }
    }
}

template <typename T>
void Tape<T>::mark_reachable(NodeId root) {
    for (int i = 0; i <= root; ++i) nodes_[i].visited = false;
    nodes_[root].visited = true;
    for (int i = root; i >= 0; --i)
        if (nodes_[i].visited)
            for (NodeId in : nodes_[i].inputs) nodes_[in].visited = true;
}

template <typename T>
void Tape<T>::run_forward(NodeId root) {
    mark_reachable(root);
    for (int i = 0; i <= root; ++i) {
        Node& n = nodes_[i];
        if (!n.visited) continue;
        if (n.op != OpKind::Leaf) eval(n);
        if (check_finite_)
            for (T v : n.value.data)
                if (!std::isfinite(double(v)))
                    throw std::runtime_error("tape: non-finite value in node #" +
                                             std::to_string(i) + " (" + op_name(n.op) + ")");
    }
}

template <typename T>
T Tape<T>::forward(NodeId root) {
    check(root);
    run_forward(root);
    const Grid<T>& v = nodes_[root].value;
    if (v.data.size() != 1)
        throw std::invalid_argument("tape: forward root must be scalar, got shape " +
                                    shape_str(v.shape, v.channels));
    forward_root_ = root;
    return v.data[0];
}

template <typename T>
const Grid<T>& Tape<T>::evaluate(NodeId id) {
    check(id);
    run_forward(id);
    return nodes_[id].value;
}

template <typename T>
void Tape<T>::backward(NodeId root) {
    check(root);
    if (root != forward_root_)
        throw std::logic_error("tape: backward requires a prior forward on the same root");
    for (int i = 0; i <= root; ++i) {
        Node& n = nodes_[i];
        n.grad = Grid<T>();
        if (n.visited && (n.needs_grad || i == root))
            n.grad = Grid<T>(n.value.shape, n.value.channels);
    }
    nodes_[root].grad.data[0] = T(1);
    for (int i = root; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.visited && !n.grad.data.empty() && n.op != OpKind::Leaf) adjoint(n);
    }
}

template <typename T>
const Grid<T>& Tape<T>::grad(NodeId id) const {
    const Node& n = nodes_[check(id)];
    if (n.grad.data.empty())
        throw std::logic_error("tape: node #" + std::to_string(id) +
                               " has no gradient (unreachable, non-differentiable path, or "
                               "backward not run)");
    return n.grad;
}

GradCheckReport gradient_check(const LossBuilder<double>& builder,
                               const std::vector<Grid<double>>& params, double delta, int n_probe,
                               double tol, uint64_t seed) {
    if (params.empty()) throw std::invalid_argument("gradient_check: no parameters");

    auto build_and_forward = [&](const std::vector<Grid<double>>& p, Tape<double>& tape,
                                 std::vector<Tape<double>::NodeId>& leaves) {
        leaves.clear();
        for (const auto& grid : p) leaves.push_back(tape.leaf(grid, true));
        return builder(tape, leaves);
    };

    Tape<double> tape;
    tape.set_check_finite(true);
    std::vector<Tape<double>::NodeId> leaves;
    Tape<double>::NodeId root = build_and_forward(params, tape, leaves);
    tape.forward(root);
    tape.backward(root);

    GradCheckReport report;
    Rng rng(seed);
    for (int k = 0; k < n_probe; ++k) {
        int p = rng.uniform_int(int(params.size()));
        std::size_t idx = std::size_t(rng.uniform_int(int(params[p].data.size())));

        double analytic = tape.grad(leaves[p]).data[idx];

        std::vector<Grid<double>> perturbed = params;
        perturbed[p].data[idx] = params[p].data[idx] + delta;
        Tape<double> tp;
        tp.set_check_finite(true);
        std::vector<Tape<double>::NodeId> lp;
        double fplus = tp.forward(build_and_forward(perturbed, tp, lp));

        perturbed[p].data[idx] = params[p].data[idx] - delta;
        Tape<double> tm;
        tm.set_check_finite(true);
        std::vector<Tape<double>::NodeId> lm;
        double fminus = tm.forward(build_and_forward(perturbed, tm, lm));

        double numeric = (fplus - fminus) / (2.0 * delta);
        double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-2});
        double rel = std::abs(analytic - numeric) / denom;
        report.probes.push_back({p, idx, analytic, numeric, rel});
        report.max_rel_error = std::max(report.max_rel_error, rel);
    }
    report.passed = report.max_rel_error <= tol;
    return report;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace m2m
