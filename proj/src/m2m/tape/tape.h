#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "m2m/core/grid.h"

namespace m2m {

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Square,
    SqrtEps,
    DivEps,
    SpatialGradient,
    BoxMean,
    WarpLinear,
    ReduceMean,
    ReduceSum,
    Stack,
    Slice,
    // Extensions used by the displacement predictor network. The objectives
    // themselves compile to the closed set above (enforced by tests).
    Conv3,
    LeakyRelu,
    AvgPool2,
    ResizeLinear,
    BroadcastAdd,
};

const char* op_name(OpKind op);

// Reverse-mode tape over dense grids. Nodes are appended in topological
// order (every input id is smaller than its consumer), so forward is a
// single in-order sweep and backward a reverse sweep. Templated on the
// scalar type: float for training throughput, double for gradient checks.
//
// Contract: forward(root) must run before backward(root); backward
// accumulates into grad() of every node reachable from root, with
// grad(root) = 1.
template <typename T>
class Tape {
public:
    using NodeId = int;

    struct Node {
        OpKind op = OpKind::Leaf;
        std::vector<NodeId> inputs;
        double attr = 0.0;    // epsilon, scalar factor, or leaky slope
        int i0 = 0, i1 = 0, i2 = 0;  // radius, slice range, or target shape
        Grid<T> value;
        Grid<T> grad;
        bool requires_grad = false;
        bool needs_grad = false;  // some leaf below requires a gradient
        bool visited = false;     // reachability scratch, managed by forward/backward
    };

    // When set, forward throws on the first non-finite node value, naming
    // the op and node id. Enabled by gradient_check and the test suite.
    void set_check_finite(bool on) { check_finite_ = on; }

    NodeId leaf(Grid<T> value, bool requires_grad);
    NodeId constant_scalar(T v) { return leaf(Grid<T>::scalar(v), false); }

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scalar_mul(NodeId a, double s);
    NodeId square(NodeId a);
    NodeId sqrt_eps(NodeId a, double eps);
    NodeId div_eps(NodeId a, NodeId b, double eps);
    // C channels in, 3C out; output channel a*C + c holds d(channel c)/d(axis a).
    // Central differences in the interior, one-sided at faces.
    NodeId spatial_gradient(NodeId a);
    // Mean over the (2r+1)^3 window intersected with the domain (counts shrink
    // at the boundary rather than padding with zeros).
    NodeId box_mean(NodeId a, int radius);
    // Pull-back warp: out(x) = img(x + u(x)) per channel, trilinear with
    // clamp-to-edge. img is input 0, the 3-channel field input 1.
    NodeId warp_linear(NodeId img, NodeId field);
    NodeId reduce_mean(NodeId a);
    NodeId reduce_sum(NodeId a);
    NodeId stack(const std::vector<NodeId>& parts);
    NodeId slice(NodeId a, int first_channel, int n_channels);

    // 3x3x3 convolution, stride 1, zero padding. weight shape {3,3,3} with
    // C_out*C_in channels, channel o*C_in + i = kernel (output o, input i).
    NodeId conv3(NodeId input, NodeId weight, int c_out);
    NodeId leaky_relu(NodeId a, double slope);
    NodeId avg_pool2(NodeId a);
    NodeId resize_linear(NodeId a, Shape3 target);
    // b has shape {1,1,1} with a's channel count; adds per-channel bias.
    NodeId broadcast_add(NodeId a, NodeId b);

    T forward(NodeId root);
    void backward(NodeId root);
    // Evaluates an arbitrary (not necessarily scalar) node and returns its
    // value. Does not arm backward; use forward for losses.
    const Grid<T>& evaluate(NodeId id);

    const Grid<T>& value(NodeId id) const { return nodes_[check(id)].value; }
    const Grid<T>& grad(NodeId id) const;
    int size() const { return int(nodes_.size()); }
    const Node& node(NodeId id) const { return nodes_[check(id)]; }

private:
    NodeId push(Node n);
    int check(NodeId id) const;
    void eval(Node& n);
    void adjoint(Node& n);
    Grid<T>& grad_buf(NodeId id);
    void mark_reachable(NodeId root);
    void run_forward(NodeId root);

    std::vector<Node> nodes_;
    bool check_finite_ = false;
    NodeId forward_root_ = -1;
};

// Finite-difference validation of the tape. The builder must deterministically
// construct the loss graph from the given parameter leaves.
template <typename T>
using LossBuilder =
    std::function<typename Tape<T>::NodeId(Tape<T>&, const std::vector<typename Tape<T>::NodeId>&)>;

struct GradCheckReport {
    struct Probe {
        int param;
        std::size_t index;
        double analytic;
        double numeric;
        double rel_error;
    };
    std::vector<Probe> probes;
    double max_rel_error = 0.0;
    bool passed = false;
};

// Central differences with step `delta` on `n_probe` randomly chosen entries
// (seeded). Passes iff max relative error <= tol.
GradCheckReport gradient_check(const LossBuilder<double>& builder,
                               const std::vector<Grid<double>>& params, double delta, int n_probe,
                               double tol, uint64_t seed);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace m2m
