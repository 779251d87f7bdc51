#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "m2m/core/rng.h"
#include "m2m/objectives/losses.h"
#include "m2m/tape/tape.h"

using namespace m2m;

namespace {

Grid<double> random_grid(Shape3 shape, int channels, uint64_t seed, double lo = -1.0,
                         double hi = 1.0) {
    Grid<double> g(shape, channels);
    Rng rng(seed);
    for (double& v : g.data) v = rng.uniform(lo, hi);
    return g;
}

// Displacement values whose fractional parts stay well away from the integer
// lattice, so finite differences never cross an interpolation kink.
Grid<double> banded_field(Shape3 shape, uint64_t seed, double lo = 0.10, double hi = 0.14) {
    Grid<double> g(shape, 3);
    Rng rng(seed);
    for (double& v : g.data) v = rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    return g;
}

// Straight-line LNCC with explicit per-voxel window loops; no tape, no
// separable filtering. Windows are intersected with the domain.
double lncc_bruteforce(const Grid<double>& A, const Grid<double>& B, int r, double eps,
                       bool squared) {
    const Shape3& sh = A.shape;
    double total = 0.0;
    for (int z = 0; z < sh[2]; ++z)
        for (int y = 0; y < sh[1]; ++y)
            for (int x = 0; x < sh[0]; ++x) {
                double sa = 0, sb = 0, sab = 0, sa2 = 0, sb2 = 0;
                int count = 0;
                for (int dz = -r; dz <= r; ++dz)
                    for (int dy = -r; dy <= r; ++dy)
                        for (int dx = -r; dx <= r; ++dx) {
                            int xx = x + dx, yy = y + dy, zz = z + dz;
                            if (xx < 0 || yy < 0 || zz < 0 || xx >= sh[0] || yy >= sh[1] ||
                                zz >= sh[2])
                                continue;
                            double a = A.channel(0)[A.vidx(xx, yy, zz)];
                            double b = B.channel(0)[B.vidx(xx, yy, zz)];
                            sa += a;
                            sb += b;
                            sab += a * b;
                            sa2 += a * a;
                            sb2 += b * b;
                            ++count;
                        }
                double ma = sa / count, mb = sb / count;
                double cov = sab / count - ma * mb;
                double va = sa2 / count - ma * ma;
                double vb = sb2 / count - mb * mb;
                double corr = cov / (std::sqrt(va + eps) * std::sqrt(vb + eps));
                total += squared ? corr * corr : corr;
            }
    return total / double(A.voxels());
}

}  // namespace

TEST_CASE("forward evaluates simple graphs") {
    Tape<double> t;
    auto x = t.leaf(Grid<double>::scalar(3.0), true);
    CHECK(t.forward(t.square(x)) == 9.0);

    Tape<double> t2;
    Grid<double> c({4, 4, 4}, 1, 2.5);
    CHECK(t2.forward(t2.reduce_mean(t2.leaf(c, false))) == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("forward of the lncc graph matches a straight-line reimplementation") {
    Grid<double> A = random_grid({8, 8, 8}, 1, 21, 0.0, 1.0);
    Grid<double> B = random_grid({8, 8, 8}, 1, 22, 0.0, 1.0);
    Tape<double> t;
    auto a = t.leaf(A, false);
    auto b = t.leaf(B, false);
    double graph = t.forward(build_lncc(t, a, b, 2, 1e-5));
    double direct = lncc_bruteforce(A, B, 2, 1e-5, false);
    CHECK(graph == doctest::Approx(direct).epsilon(1e-10));

    Tape<double> t2;
    double graph_sq = t2.forward(build_lncc_sq(t2, t2.leaf(A, false), t2.leaf(B, false), 2, 1e-5));
    double direct_sq = lncc_bruteforce(A, B, 2, 1e-5, true);
    CHECK(graph_sq == doctest::Approx(direct_sq).epsilon(1e-10));
}

TEST_CASE("backward of reductions gives the textbook gradients") {
    Grid<double> X = random_grid({4, 4, 4}, 1, 5);
    Tape<double> t;
    auto x = t.leaf(X, true);
    auto root = t.reduce_mean(x);
    t.forward(root);
    t.backward(root);
    CHECK(t.grad(root).data[0] == 1.0);
    for (double g : t.grad(x).data) CHECK(g == doctest::Approx(1.0 / 64).epsilon(1e-15));

    Tape<double> t2;
    auto x2 = t2.leaf(X, true);
    auto root2 = t2.reduce_mean(t2.square(x2));
    t2.forward(root2);
    t2.backward(root2);
    for (std::size_t i = 0; i < X.data.size(); ++i)
        CHECK(t2.grad(x2).data[i] == doctest::Approx(2.0 * X.data[i] / 64).epsilon(1e-14));
}

TEST_CASE("backward before forward fails") {
    Tape<double> t;
    auto x = t.leaf(Grid<double>::scalar(1.0), true);
    auto root = t.square(x);
    CHECK_THROWS_AS(t.backward(root), std::logic_error);
    t.forward(root);
    auto other = t.square(x);  // structural change invalidates the last forward
    CHECK_THROWS_AS(t.backward(other), std::logic_error);
}

TEST_CASE("shape mismatches are reported with both shapes") {
    Tape<double> t;
    auto a = t.leaf(Grid<double>({4, 4, 4}, 1), false);
    auto b = t.leaf(Grid<double>({4, 4, 2}, 1), false);
    CHECK_THROWS_WITH_AS(t.add(a, b), doctest::Contains("[4,4,2]"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(t.mul(a, b), doctest::Contains("[4,4,4]"), std::invalid_argument);
}

TEST_CASE("non-finite values are caught and name the node") {
    Tape<double> t;
    t.set_check_finite(true);
    Grid<double> bad({2, 2, 2}, 1, 1.0);
    auto a = t.leaf(bad, true);
    auto b = t.leaf(Grid<double>({2, 2, 2}, 1, -1.0), false);
    // sqrt(-1 + eps) = NaN
    auto root = t.reduce_mean(t.sqrt_eps(t.mul(a, b), 1e-12));
    CHECK_THROWS_WITH_AS(t.forward(root), doctest::Contains("sqrt_eps"), std::runtime_error);
}

TEST_CASE("linearity of backward") {
    Grid<double> X = random_grid({5, 4, 3}, 1, 31);
    auto grad_of = [&](double wa, double wb) {
        Tape<double> t;
        auto x = t.leaf(X, true);
        auto f = t.reduce_mean(t.square(x));
        auto g = t.reduce_mean(t.mul(x, t.leaf(random_grid({5, 4, 3}, 1, 32), false)));
        auto root = t.add(t.scalar_mul(f, wa), t.scalar_mul(g, wb));
        t.forward(root);
        t.backward(root);
        return t.grad(x);
    };
    Grid<double> g10 = grad_of(1.0, 0.0);
    Grid<double> g01 = grad_of(0.0, 1.0);
    Grid<double> gmix = grad_of(2.0, 3.0);
    for (std::size_t i = 0; i < X.data.size(); ++i)
        CHECK(gmix.data[i] ==
              doctest::Approx(2.0 * g10.data[i] + 3.0 * g01.data[i]).epsilon(1e-12));
}

TEST_CASE("values and gradients are bit-identical across rebuilds") {
    Grid<double> A = random_grid({6, 6, 6}, 1, 41, 0.0, 1.0);
    Grid<double> U = banded_field({6, 6, 6}, 42);
    auto run = [&](Grid<double>& gout, double& val) {
        Tape<double> t;
        auto img = t.leaf(A, false);
        auto u = t.leaf(U, true);
        auto root = build_sim_loss(t, t.warp_linear(img, u), img, MetricCfg{});
        val = t.forward(root);
        t.backward(root);
        gout = t.grad(u);
    };
    Grid<double> g1, g2;
    double v1, v2;
    run(g1, v1);
    run(g2, v2);
    CHECK(std::memcmp(&v1, &v2, sizeof(double)) == 0);
    REQUIRE(g1.data.size() == g2.data.size());
    CHECK(std::memcmp(g1.data.data(), g2.data.data(), g1.data.size() * sizeof(double)) == 0);
}

TEST_CASE("gradient_check on a quadratic is exact to truncation order") {
    std::vector<Grid<double>> params = {random_grid({4, 4, 4}, 1, 51)};
    auto builder = [](Tape<double>& t, const std::vector<int>& leaves) {
        return t.scalar_mul(t.reduce_sum(t.square(leaves[0])), 0.5);
    };
    GradCheckReport rep = gradient_check(builder, params, 1e-4, 50, 1e-8, 7);
    CHECK(rep.passed);
    for (const auto& p : rep.probes)
        CHECK(p.analytic == doctest::Approx(params[p.param].data[p.index]).epsilon(1e-10));
}

TEST_CASE("per-primitive gradient checks") {
    Shape3 sh{5, 4, 6};
    auto check_unary = [&](const char* name, auto make, const Grid<double>& X, double tol = 1e-7) {
        INFO(name);
        std::vector<Grid<double>> params = {X};
        auto builder = [&make](Tape<double>& t, const std::vector<int>& l) {
            return t.reduce_mean(make(t, l[0]));
        };
        GradCheckReport rep = gradient_check(builder, params, 1e-5, 40, tol, 99);
        CHECK(rep.passed);
        if (!rep.passed) {
            for (const auto& p : rep.probes)
                if (p.rel_error > tol)
                    MESSAGE("param ", p.param, "[", p.index, "] analytic=", p.analytic,
                            " numeric=", p.numeric);
        }
    };

    check_unary("square", [](Tape<double>& t, int a) { return t.square(a); },
                random_grid(sh, 2, 61));
    check_unary("sqrt_eps", [](Tape<double>& t, int a) { return t.sqrt_eps(a, 1e-5); },
                random_grid(sh, 1, 62, 0.2, 1.0));
    check_unary("scalar_mul", [](Tape<double>& t, int a) { return t.scalar_mul(a, -1.7); },
                random_grid(sh, 2, 63));
    check_unary("spatial_gradient", [](Tape<double>& t, int a) { return t.square(t.spatial_gradient(a)); },
                random_grid(sh, 2, 64));
    check_unary("box_mean", [](Tape<double>& t, int a) { return t.square(t.box_mean(a, 2)); },
                random_grid(sh, 1, 65));
    check_unary("leaky_relu", [](Tape<double>& t, int a) { return t.square(t.leaky_relu(a, 0.2)); },
                random_grid(sh, 2, 66, 0.05, 1.0));
    check_unary("avg_pool2", [](Tape<double>& t, int a) { return t.square(t.avg_pool2(a)); },
                random_grid({4, 4, 6}, 2, 67));
    check_unary("resize_linear",
                [](Tape<double>& t, int a) { return t.square(t.resize_linear(a, {7, 9, 11})); },
                random_grid({4, 4, 6}, 2, 68));
    check_unary("slice", [](Tape<double>& t, int a) { return t.square(t.slice(a, 1, 2)); },
                random_grid(sh, 4, 69));

    // binary ops
    {
        std::vector<Grid<double>> params = {random_grid(sh, 1, 71), random_grid(sh, 1, 72, 0.3, 1.0)};
        auto builder = [](Tape<double>& t, const std::vector<int>& l) {
            return t.reduce_mean(t.div_eps(l[0], l[1], 1e-5));
        };
        CHECK(gradient_check(builder, params, 1e-5, 40, 1e-7, 101).passed);
    }
    {
        std::vector<Grid<double>> params = {random_grid(sh, 2, 73), random_grid(sh, 2, 74)};
        auto builder = [](Tape<double>& t, const std::vector<int>& l) {
            return t.reduce_mean(t.square(t.sub(t.mul(l[0], l[1]), t.add(l[0], l[1]))));
        };
        CHECK(gradient_check(builder, params, 1e-5, 40, 1e-7, 102).passed);
    }
    {
        // stack + broadcast_add
        std::vector<Grid<double>> params = {random_grid(sh, 1, 75), random_grid(sh, 2, 76),
                                            random_grid({1, 1, 1}, 3, 77)};
        auto builder = [](Tape<double>& t, const std::vector<int>& l) {
            return t.reduce_mean(t.square(t.broadcast_add(t.stack({l[0], l[1]}), l[2])));
        };
        CHECK(gradient_check(builder, params, 1e-5, 40, 1e-7, 103).passed);
    }
    {
        // conv3: 2 in, 3 out
        std::vector<Grid<double>> params = {random_grid({5, 5, 5}, 2, 78),
                                            random_grid({3, 3, 3}, 6, 79, -0.3, 0.3)};
        auto builder = [](Tape<double>& t, const std::vector<int>& l) {
            return t.reduce_mean(t.square(t.conv3(l[0], l[1], 3)));
        };
        CHECK(gradient_check(builder, params, 1e-5, 60, 1e-7, 104).passed);
    }
}

TEST_CASE("warp_linear adjoints match finite differences") {
    Shape3 sh{6, 6, 6};
    std::vector<Grid<double>> params = {random_grid(sh, 2, 81, 0.0, 1.0), banded_field(sh, 82)};
    auto builder = [](Tape<double>& t, const std::vector<int>& l) {
        auto w = t.warp_linear(l[0], l[1]);
        // a non-symmetric functional so both adjoints matter
        return t.reduce_mean(t.mul(w, t.square(w)));
    };
    GradCheckReport rep = gradient_check(builder, params, 1e-5, 80, 1e-5, 105);
    CHECK(rep.passed);
    CHECK(rep.max_rel_error <= 1e-5);
}

TEST_CASE("conv3 with an identity kernel copies its input") {
    Grid<double> X = random_grid({4, 5, 3}, 1, 83);
    Grid<double> W({3, 3, 3}, 1, 0.0);
    W.at(0, 1, 1, 1) = 1.0;  // center tap
    Tape<double> t;
    auto out = t.conv3(t.leaf(X, false), t.leaf(W, false), 1);
    t.evaluate(out);
    for (std::size_t i = 0; i < X.data.size(); ++i) CHECK(t.value(out).data[i] == X.data[i]);
}

TEST_CASE("box_mean of a small line matches hand-computed window means") {
    Grid<double> X({3, 1, 1}, 1);
    X.data = {1.0, 2.0, 4.0};
    Tape<double> t;
    auto out = t.box_mean(t.leaf(X, false), 1);
    t.evaluate(out);
    CHECK(t.value(out).data[0] == doctest::Approx(1.5));   // (1+2)/2
    CHECK(t.value(out).data[1] == doctest::Approx(7.0 / 3));
    CHECK(t.value(out).data[2] == doctest::Approx(3.0));   // (2+4)/2
}

TEST_CASE("spatial_gradient is exact on ramps, one-sided at faces") {
    Grid<double> X({5, 3, 3}, 1);
    for (int z = 0; z < 3; ++z)
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 5; ++x) X.at(0, x, y, z) = double(x * x);
    Tape<double> t;
    auto g = t.spatial_gradient(t.leaf(X, false));
    t.evaluate(g);
    // d/dx channel 0: one-sided 1 at x=0, central 2x inside, one-sided 7 at x=4
    CHECK(t.value(g).at(0, 0, 1, 1) == 1.0);
    CHECK(t.value(g).at(0, 2, 1, 1) == 4.0);
    CHECK(t.value(g).at(0, 4, 1, 1) == 7.0);
    // d/dy is zero everywhere
    CHECK(t.value(g).at(1, 2, 1, 1) == 0.0);
}

TEST_CASE("full m2m loss gradients match central finite differences") {
    Shape3 sh{8, 8, 8};
    Grid<double> S = random_grid(sh, 1, 91, 0.0, 1.0);
    Grid<double> Tv = random_grid(sh, 1, 92, 0.0, 1.0);
    Grid<double> Sp = random_grid(sh, 1, 93, 0.0, 1.0);
    Grid<double> Tp = random_grid(sh, 1, 94, 0.0, 1.0);
    std::vector<Grid<double>> params = {banded_field(sh, 95), banded_field(sh, 96),
                                        banded_field(sh, 97), banded_field(sh, 98)};
    MetricCfg cfg;
    auto builder = [&](Tape<double>& t, const std::vector<int>& l) {
        auto s = t.leaf(S, false);
        auto tv = t.leaf(Tv, false);
        auto sp = t.leaf(Sp, false);
        auto tp = t.leaf(Tp, false);
        M2mTermIds ids = build_m2m_terms(t, s, tv, sp, tp, l[0], l[1], l[2], l[3], cfg);
        return t.add(t.add(ids.s_sp, ids.sp_s), t.add(ids.t_tp, ids.tp_t));
    };
    GradCheckReport rep = gradient_check(builder, params, 1e-4, 100, 1e-4, 111);
    CHECK(rep.passed);
    CHECK(rep.max_rel_error <= 1e-4);
}

TEST_CASE("gradient_check passes for the regularizers") {
    {
        std::vector<Grid<double>> params = {banded_field({6, 6, 6}, 121)};
        auto builder = [](Tape<double>& t, const std::vector<int>& l) {
            return build_diffusion(t, l[0]);
        };
        CHECK(gradient_check(builder, params, 1e-4, 60, 1e-5, 122).passed);
    }
    {
        std::vector<Grid<double>> params = {banded_field({6, 6, 6}, 123), banded_field({6, 6, 6}, 124),
                                            banded_field({6, 6, 6}, 125), banded_field({6, 6, 6}, 126)};
        auto builder = [](Tape<double>& t, const std::vector<int>& l) {
            return build_jacobian_penalty(t, {l[0], l[1], l[2], l[3]});
        };
        CHECK(gradient_check(builder, params, 1e-4, 80, 1e-5, 127).passed);
    }
}
