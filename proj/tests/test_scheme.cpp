#include "bsde/errors.hpp"
#include "bsde/scheme.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <functional>
#include <random>
#include <vector>

using namespace bsde;

namespace {

EngineConfig tree_engine() {
    EngineConfig e;
    e.kind = EngineConfig::Kind::tree_exact;
    return e;
}

EngineConfig poly_engine(const std::string& basis = "poly3", double ridge = 1e-8) {
    EngineConfig e;
    e.kind = EngineConfig::Kind::regression;
    e.basis = basis;
    e.ridge = ridge;
    return e;
}

double simpson(const std::function<double(double)>& g, double a, double b, int n) {
    const double h = (b - a) / n;
    double acc = g(a) + g(b);
    for (int i = 1; i < n; ++i) acc += g(a + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

ProblemSpec constant_terminal_problem(double c) {
    ProblemSpec p = find_problem("P1");
    p.name = "const";
    p.terminal = [c](const TimeGrid&, std::span<const double>, std::span<const double>,
                     std::span<double> xi) { xi[0] = c; };
    return p;
}

} // namespace

TEST_CASE("pure martingale problem is exact on the tree: Y = W, Z = 1, U = 0") {
    const PathEnsemble tree = enumerate_tree_paths(build_tree(6, 1.0));
    const SchemeOutput out = run_scheme(find_problem("P1"), tree, 1, tree_engine());
    for (int p = 0; p < out.paths; ++p) {
        for (int k = 0; k <= 6; ++k) {
            CHECK(std::fabs(out.y(p, k) - tree.value(p, k, 0)) <= 1e-12);
            CHECK(std::fabs(out.u(p, k)) <= 1e-12);
        }
        for (int k = 0; k < 6; ++k) CHECK(std::fabs(out.z(p, k) - 1.0) <= 1e-12);
    }
}

TEST_CASE("terminal condition is pinned exactly") {
    const TimeGrid grid = build_grid(1.0, 16, 4);
    const PathEnsemble e = sample_brownian(grid, 1, 512, 3);
    const SchemeOutput out = run_scheme(find_problem("P4"), e, 4, poly_engine());
    const std::vector<double> xi = evaluate_terminal(find_problem("P4"), e, {});
    for (int p = 0; p < out.paths; ++p)
        CHECK(out.y(p, 16) == xi[static_cast<std::size_t>(p)]);
}

TEST_CASE("V starts at zero and increments by Z dW exactly") {
    const TimeGrid grid = build_grid(1.0, 12, 3);
    const PathEnsemble e = sample_brownian(grid, 2, 256, 8);
    const SchemeOutput out = run_scheme(find_problem("P5"), e, 3, poly_engine("poly2"));
    for (int p = 0; p < out.paths; ++p) {
        CHECK(out.v(p, 0) == 0.0);
        for (int k = 0; k < 12; ++k) {
            double zdw = 0.0;
            for (int l = 0; l < 2; ++l) zdw += out.z(p, k, 0, l) * e.increment(p, k, l);
            CHECK(out.v(p, k + 1) == doctest::Approx(out.v(p, k) + zdw).epsilon(1e-14));
        }
        // U vanishes at the terminal node
        CHECK(out.u(p, 12) == 0.0);
    }
}

TEST_CASE("zero generator makes the output independent of the delay") {
    const PathEnsemble tree = enumerate_tree_paths(build_tree(6, 1.0));
    const SchemeOutput d1 = run_scheme(find_problem("P1"), tree, 1, tree_engine());
    const SchemeOutput d2 = run_scheme(find_problem("P1"), tree, 2, tree_engine());
    const SchemeOutput d6 = run_scheme(find_problem("P1"), tree, 6, tree_engine());
    CHECK(d1.Y == d2.Y);
    CHECK(d1.Z == d2.Z);
    CHECK(d1.U == d2.U);
    CHECK(d1.V == d2.V);
    CHECK(d1.Y == d6.Y);
    CHECK(d1.Z == d6.Z);

    // same degeneracy under Monte Carlo regression
    const TimeGrid grid = build_grid(1.0, 16, 1);
    const PathEnsemble e = sample_brownian(grid, 1, 512, 11);
    const SchemeOutput m1 = run_scheme(find_problem("P1"), e, 1, poly_engine());
    const SchemeOutput m4 = run_scheme(find_problem("P1"), e, 4, poly_engine());
    CHECK(m1.Y == m4.Y);
    CHECK(m1.Z == m4.Z);
    CHECK(m1.V == m4.V);
}

TEST_CASE("zero terminal value with the sqrt generator stays at the zero fixed point") {
    const PathEnsemble tree = enumerate_tree_paths(build_tree(6, 1.0));
    const SchemeOutput out = run_scheme(find_problem("P3"), tree, 2, tree_engine());
    for (double v : out.Y) CHECK(std::fabs(v) <= 1e-12);
    for (double v : out.Z) CHECK(std::fabs(v) <= 1e-12);
    for (double v : out.U) CHECK(std::fabs(v) <= 1e-12);

    const TimeGrid grid = build_grid(1.0, 16, 4);
    const PathEnsemble e = sample_brownian(grid, 1, 256, 5);
    const SchemeOutput mc = run_scheme(find_problem("P3"), e, 4, poly_engine());
    for (double v : mc.Y) CHECK(std::fabs(v) <= 1e-12);
    for (double v : mc.Z) CHECK(std::fabs(v) <= 1e-12);
}

TEST_CASE("closed-loop residual vanishes under the exact engine") {
    // the identity is algebraic once conditional expectations are exact,
    // whatever the problem or delay
    for (const char* name : {"P1", "P2", "P3", "P4", "P4b"}) {
        const ProblemSpec& problem = find_problem(name);
        for (int depth : {5, 8}) {
            for (int D : {1, 3, depth}) {
                const PathEnsemble tree = enumerate_tree_paths(build_tree(depth, 1.0), D);
                const SchemeOutput out = run_scheme(problem, tree, D, tree_engine());
                const ResidualReport r = residual_bsde(out, problem, tree);
                INFO(name, " depth=", depth, " D=", D);
                CHECK(r.max_abs <= 1e-10);
            }
        }
    }
}

TEST_CASE("random affine generators close the loop exactly on the tree") {
    // property: for arbitrary bounded affine data the identity is algebraic
    // under exact conditional expectations
    std::mt19937_64 rng(2718);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 8; ++trial) {
        const int d = 1 + static_cast<int>(rng() % 2);
        const int depth = 5 + static_cast<int>(rng() % 2);
        const int D = 1 + static_cast<int>(rng() % depth);
        std::vector<double> tensor(static_cast<std::size_t>(d) * d, 0.0); // m = 1
        for (double& v : tensor) v = 0.5 * u(rng);
        std::vector<double> weights(static_cast<std::size_t>(d), 0.0);
        for (double& v : weights) v = u(rng);

        ProblemSpec p;
        p.name = "random-affine";
        p.generator.y_dim = d;
        p.generator.w_dim = 1;
        p.generator.growth_K = 2.0;
        p.generator.alpha = [tensor](double, std::span<const double>, std::span<const double>,
                                     std::span<double> a) {
            std::copy(tensor.begin(), tensor.end(), a.begin());
        };
        p.generator.beta = [d](double t, std::span<const double>, std::span<const double> y,
                               std::span<double> b) {
            for (int j = 0; j < d; ++j)
                b[static_cast<std::size_t>(j)] = std::tanh(y[static_cast<std::size_t>(j)] + t);
        };
        p.forward = [](const TimeGrid&, std::span<const double>, std::span<double>) {};
        p.terminal = [d, weights](const TimeGrid& grid, std::span<const double> w_path,
                                  std::span<const double>, std::span<double> xi) {
            for (int j = 0; j < d; ++j)
                xi[static_cast<std::size_t>(j)] =
                    std::tanh(weights[static_cast<std::size_t>(j)] *
                              w_path[static_cast<std::size_t>(grid.steps)]);
        };
        p.state_dim = 1;
        p.state_features = [](const TimeGrid&, int k, std::span<const double> w_path,
                              std::span<const double>, std::span<double> s) {
            s[0] = w_path[static_cast<std::size_t>(k)];
        };

        const PathEnsemble tree = enumerate_tree_paths(build_tree(depth, 1.0), D);
        const SchemeOutput out = run_scheme(p, tree, D, tree_engine());
        const ResidualReport r = residual_bsde(out, p, tree);
        INFO("trial ", trial, " d=", d, " depth=", depth, " D=", D);
        CHECK(r.max_abs <= 1e-11);
    }
}

TEST_CASE("constant terminal value with zero generator has zero residual") {
    const ProblemSpec problem = constant_terminal_problem(2.25);
    const TimeGrid grid = build_grid(1.0, 8, 2);
    const PathEnsemble e = sample_brownian(grid, 1, 128, 13);
    // indicator basis at ridge 0: any shrinkage would leave an O(ridge)
    // defect in the constant (a poly basis is also rank-deficient at node
    // 0, where every state is W_0 = 0)
    const SchemeOutput out = run_scheme(problem, e, 2, poly_engine("indicator-tree", 0.0));
    const ResidualReport r = residual_bsde(out, problem, e);
    CHECK(r.max_abs <= 1e-10);
    for (int p = 0; p < out.paths; ++p)
        for (int k = 0; k <= 8; ++k) CHECK(out.y(p, k) == doctest::Approx(2.25).epsilon(1e-12));
}

TEST_CASE("regression residual budget on the martingale problem") {
    const TimeGrid grid = build_grid(1.0, 64, 1);
    const PathEnsemble e = sample_brownian(grid, 1, 1 << 14, 101);
    const ProblemSpec& p1 = find_problem("P1");
    const SchemeOutput out = run_scheme(p1, e, 1, poly_engine());
    const ResidualReport r = residual_bsde(out, p1, e);
    for (int k = 0; k <= 64; ++k) {
        double ey = 0.0;
        for (int p = 0; p < out.paths; ++p) ey += std::fabs(out.y(p, k));
        ey /= out.paths;
        CHECK(r.mean_norm_profile[static_cast<std::size_t>(k)] <= 5e-2 * (1.0 + ey));
    }
}

TEST_CASE("outputs are measurable at each node on the tree") {
    // leaves sharing the first k increments must share every node-k value
    const int depth = 6;
    const TreeModel t = build_tree(depth, 1.0);
    const PathEnsemble tree = enumerate_tree_paths(t, 2);
    const SchemeOutput out = run_scheme(find_problem("P4"), tree, 2, tree_engine());
    for (int k = 0; k <= depth; ++k) {
        for (long leaf = 0; leaf < t.leaves(); ++leaf) {
            const long rep = t.node_of(leaf, k) << (depth - k); // block representative
            CHECK(out.y(static_cast<int>(leaf), k) == out.y(static_cast<int>(rep), k));
            CHECK(out.u(static_cast<int>(leaf), k) == out.u(static_cast<int>(rep), k));
            if (k < depth) {
                CHECK(out.z(static_cast<int>(leaf), k) == out.z(static_cast<int>(rep), k));
                CHECK(out.ztilde(static_cast<int>(leaf), k) ==
                      out.ztilde(static_cast<int>(rep), k));
            }
        }
    }
}

TEST_CASE("the induction walks the grid strictly backward") {
    ProblemSpec probe = find_problem("P4");
    auto eval_times = std::make_shared<std::vector<double>>();
    auto base = probe.generator.beta;
    probe.generator.beta = [base, eval_times](double t, std::span<const double> x,
                                              std::span<const double> y, std::span<double> b) {
        if (eval_times->empty() || eval_times->back() != t) eval_times->push_back(t);
        base(t, x, y, b);
    };
    const TimeGrid grid = build_grid(1.0, 10, 4); // shortened earliest block
    const PathEnsemble e = sample_brownian(grid, 1, 64, 2);
    run_scheme(probe, e, 4, poly_engine("poly2"));
    REQUIRE(eval_times->size() == 10); // nodes N-1 .. 0, each visited once
    for (std::size_t i = 1; i < eval_times->size(); ++i)
        CHECK((*eval_times)[i] < (*eval_times)[i - 1]);
}

TEST_CASE("maximal delay: Y collapses to the conditional expectation of xi") {
    const int depth = 6;
    const PathEnsemble tree = enumerate_tree_paths(build_tree(depth, 1.0), depth);
    const ProblemSpec& p4 = find_problem("P4");
    const SchemeOutput out = run_scheme(p4, tree, depth, tree_engine());
    TreeExactEngine oracle(build_tree(depth, 1.0));
    const std::vector<double> xi = evaluate_terminal(p4, tree, {});
    for (int k = 0; k <= depth; ++k) {
        const std::vector<double> ref = oracle.project(k, xi, 1);
        for (int p = 0; p < out.paths; ++p)
            CHECK(out.y(p, k) == doctest::Approx(ref[static_cast<std::size_t>(p)]).epsilon(1e-12));
        if (k < depth)
            for (int p = 0; p < out.paths; ++p) CHECK(out.ztilde(p, k) == 0.0);
    }
}

TEST_CASE("delay gap: constant kernel has zero shift defect") {
    // pure shift of a constant kernel: substitute Ztilde = Z
    const PathEnsemble tree = enumerate_tree_paths(build_tree(6, 1.0), 2);
    SchemeOutput out = run_scheme(find_problem("P1"), tree, 2, tree_engine());
    out.Ztilde = out.Z;
    const DelayGapReport gap = delay_shift_gap(out, find_problem("P1"), tree);
    CHECK(gap.shift_l2_mean <= 1e-24);
    CHECK(gap.weighted_mean <= 1e-24);
}

TEST_CASE("delay gap of the scheme run counts the terminal window") {
    // the scheme leaves Ztilde = 0 within D steps of T; for the unit
    // kernel the defect integral is exactly h = D dt
    const int depth = 6;
    for (int D : {1, 2, 3}) {
        const PathEnsemble tree = enumerate_tree_paths(build_tree(depth, 1.0), D);
        const SchemeOutput out = run_scheme(find_problem("P1"), tree, D, tree_engine());
        const DelayGapReport gap = delay_shift_gap(out, find_problem("P1"), tree);
        CHECK(gap.shift_l2_mean == doctest::Approx(D * tree.grid.dt()).epsilon(1e-10));
    }
}

TEST_CASE("delay gap of the substituted exponential kernel matches quadrature") {
    // deterministic kernel z(t) = e^{T-t} with the delayed control given by
    // the shifted formula; the defect integral has a closed form
    const double T = 1.0;
    const int N = 64;
    const int D = 16; // h = 1/4
    const double h = 0.25;
    const TimeGrid grid = build_grid(T, N, D);
    const PathEnsemble e = sample_brownian(grid, 1, 64, 4);
    const ProblemSpec& p1 = find_problem("P1");

    SchemeOutput out = run_scheme(p1, e, D, poly_engine());
    for (int p = 0; p < out.paths; ++p)
        for (int k = 0; k < N; ++k) {
            out.Z[out.step_index(p, k, 0, 0)] = std::exp(T - grid.node(k));
            out.Ztilde[out.step_index(p, k, 0, 0)] = std::exp(T - grid.node(k) - h);
        }

    const double oracle = simpson(
        [&](double s) {
            const double diff = std::exp(T - s - h) - std::exp(T - s);
            return diff * diff;
        },
        0.0, T, 4096);
    const double closed_form =
        (1.0 - std::exp(-h)) * (1.0 - std::exp(-h)) * (std::exp(2.0 * T) - 1.0) / 2.0;
    CHECK(oracle == doctest::Approx(closed_form).epsilon(1e-8));

    const DelayGapReport gap = delay_shift_gap(out, p1, e);
    CHECK(std::fabs(gap.shift_l2_mean - oracle) <= 0.01);
    CHECK(gap.shift_l2_se <= 1e-12); // deterministic kernels, no spread
}

TEST_CASE("delay gap grows with the delay on the bounded affine problem") {
    const TimeGrid grid = build_grid(1.0, 32, 1);
    const PathEnsemble e = sample_brownian(grid, 1, 2048, 77);
    const ProblemSpec& p4 = find_problem("P4");
    const SchemeOutput tight = run_scheme(p4, e, 1, poly_engine());
    const SchemeOutput loose = run_scheme(p4, e, 32, poly_engine());
    const DelayGapReport g1 = delay_shift_gap(tight, p4, e);
    const DelayGapReport g32 = delay_shift_gap(loose, p4, e);
    CHECK(g32.shift_l2_mean > g1.shift_l2_mean);
}

TEST_CASE("delay gap requires an affine generator") {
    ProblemSpec nonaffine = find_problem("P1");
    nonaffine.generator.affine = false;
    nonaffine.generator.nonaffine_eval = [](double, std::span<const double>,
                                            std::span<const double>, std::span<const double> z,
                                            std::span<double> f) { f[0] = z[0] * z[0]; };
    const TimeGrid grid = build_grid(1.0, 8, 2);
    const PathEnsemble e = sample_brownian(grid, 1, 128, 1);
    const SchemeOutput out = run_scheme(nonaffine, e, 2, poly_engine("poly2"));
    CHECK_THROWS_AS(delay_shift_gap(out, nonaffine, e), ConfigError);
}

TEST_CASE("scheme validates dimensions and delay range") {
    const TimeGrid grid = build_grid(1.0, 8, 2);
    const PathEnsemble e = sample_brownian(grid, 1, 64, 1);
    CHECK_THROWS_AS(run_scheme(find_problem("P5"), e, 2, poly_engine()), ContractError);
    CHECK_THROWS_AS(run_scheme(find_problem("P1"), e, 0, poly_engine()), ConfigError);
    CHECK_THROWS_AS(run_scheme(find_problem("P1"), e, 9, poly_engine()), ConfigError);
    CHECK_THROWS_AS(run_scheme(find_problem("P1"), e, 2, tree_engine()), ConfigError);
}

TEST_CASE("thread count does not change the scheme output") {
    const TimeGrid grid = build_grid(1.0, 16, 4);
    const PathEnsemble e = sample_brownian(grid, 1, 512, 23);
    const ProblemSpec& p4 = find_problem("P4");
    const SchemeOutput serial = run_scheme(p4, e, 4, poly_engine());
    setenv("BSDE_THREADS", "4", 1);
    const SchemeOutput sharded = run_scheme(p4, e, 4, poly_engine());
    unsetenv("BSDE_THREADS");
    CHECK(serial.Y == sharded.Y);
    CHECK(serial.Z == sharded.Z);
    CHECK(serial.U == sharded.U);
    CHECK(serial.V == sharded.V);
}

TEST_CASE("vector-valued wiring: a d=2, m=2 system closes the loop") {
    // rotation-coupled drift plus a full 2x2x2 coefficient tensor
    ProblemSpec p;
    p.name = "vec2";
    p.generator.y_dim = 2;
    p.generator.w_dim = 2;
    p.generator.growth_K = 1.0;
    p.generator.alpha = [](double, std::span<const double>, std::span<const double>,
                           std::span<double> a) {
        // a[i][j][l], flattened over (j, l)
        const double tensor[8] = {0.2, -0.1, 0.0, 0.05, 0.1, 0.0, -0.2, 0.15};
        std::copy(tensor, tensor + 8, a.begin());
    };
    p.generator.beta = [](double, std::span<const double>, std::span<const double> y,
                          std::span<double> b) {
        b[0] = 0.3 * std::tanh(y[1]);
        b[1] = -0.3 * std::tanh(y[0]);
    };
    p.forward = [](const TimeGrid&, std::span<const double>, std::span<double>) {};
    p.terminal = [](const TimeGrid& grid, std::span<const double> w_path,
                    std::span<const double>, std::span<double> xi) {
        const std::size_t last = static_cast<std::size_t>(grid.steps) * 2;
        xi[0] = std::tanh(w_path[last]);
        xi[1] = std::tanh(w_path[last + 1]);
    };
    p.state_dim = 2;
    p.state_features = [](const TimeGrid&, int k, std::span<const double> w_path,
                          std::span<const double>, std::span<double> s) {
        s[0] = w_path[static_cast<std::size_t>(k) * 2];
        s[1] = w_path[static_cast<std::size_t>(k) * 2 + 1];
    };

    const TimeGrid grid = build_grid(1.0, 16, 4);
    const PathEnsemble e = sample_brownian(grid, 2, 8192, 91);
    const SchemeOutput out = run_scheme(p, e, 4, poly_engine("poly2"));
    CHECK(out.y_dim == 2);
    CHECK(out.Z.size() == static_cast<std::size_t>(8192) * 16 * 2 * 2);
    const ResidualReport r = residual_bsde(out, p, e);
    for (int k = 0; k <= 16; ++k)
        CHECK(r.mean_norm_profile[static_cast<std::size_t>(k)] <= 0.2);

    // terminal pinning holds coordinate-wise
    const std::vector<double> xi = evaluate_terminal(p, e, {});
    for (int path = 0; path < out.paths; ++path)
        for (int j = 0; j < 2; ++j)
            CHECK(out.y(path, 16, j) == xi[static_cast<std::size_t>(path) * 2 + j]);
}

TEST_CASE("multidimensional wiring: P5 runs and closes the loop on Monte Carlo") {
    const TimeGrid grid = build_grid(1.0, 16, 4);
    const PathEnsemble e = sample_brownian(grid, 2, 8192, 55);
    const ProblemSpec& p5 = find_problem("P5");
    const SchemeOutput out = run_scheme(p5, e, 4, poly_engine("poly2"));
    const ResidualReport r = residual_bsde(out, p5, e);
    // regression-quality residual, not exact; generous budget
    for (int k = 0; k <= 16; ++k)
        CHECK(r.mean_norm_profile[static_cast<std::size_t>(k)] <= 0.2);
}
