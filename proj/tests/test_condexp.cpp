#include "bsde/condexp.hpp"
#include "bsde/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

using namespace bsde;

namespace {

// node-prefix identifiers as states: the full information at level k
std::vector<double> prefix_states(const TreeModel& tree, int level) {
    std::vector<double> s(static_cast<std::size_t>(tree.leaves()));
    for (long leaf = 0; leaf < tree.leaves(); ++leaf)
        s[static_cast<std::size_t>(leaf)] = static_cast<double>(tree.node_of(leaf, level));
    return s;
}

std::vector<double> walk_states(const TreeModel& tree, int level) {
    std::vector<double> s(static_cast<std::size_t>(tree.leaves()));
    for (long leaf = 0; leaf < tree.leaves(); ++leaf)
        s[static_cast<std::size_t>(leaf)] = tree.value(leaf, level);
    return s;
}

} // namespace

TEST_CASE("tree conditional expectation of the terminal walk is the walk") {
    const TreeModel t = build_tree(2, 1.0);
    std::vector<double> wt(4);
    for (long leaf = 0; leaf < 4; ++leaf) wt[static_cast<std::size_t>(leaf)] = t.value(leaf, 2);
    const std::vector<double> nodes = tree_condexp(t, 1, wt, 1);
    REQUIRE(nodes.size() == 2);
    // the +-sqrt(dt) children average out, leaving the level-1 value
    CHECK(nodes[0] == doctest::Approx(t.value(0, 1)).epsilon(1e-15));
    CHECK(nodes[1] == doctest::Approx(t.value(2, 1)).epsilon(1e-15));
}

TEST_CASE("tree conditional expectation of a constant is the constant") {
    const TreeModel t = build_tree(4, 2.0);
    std::vector<double> c(static_cast<std::size_t>(t.leaves()), 3.25);
    for (int level = 0; level <= 4; ++level)
        for (double v : tree_condexp(t, level, c, 1)) CHECK(v == doctest::Approx(3.25));
}

TEST_CASE("tower property holds exactly on the tree") {
    const TreeModel t = build_tree(6, 1.0);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> g(static_cast<std::size_t>(t.leaves()));
    for (double& v : g) v = u(rng);

    for (int s = 0; s <= 4; ++s) {
        const int tlevel = s + 2;
        const std::vector<double> inner = tree_condexp_leafwise(t, tlevel, g, 1);
        const std::vector<double> two_step = tree_condexp(t, s, inner, 1);
        const std::vector<double> direct = tree_condexp(t, s, g, 1);
        for (std::size_t i = 0; i < direct.size(); ++i)
            CHECK(two_step[i] == doctest::Approx(direct[i]).epsilon(1e-13));
    }
}

TEST_CASE("tree level out of range is a contract error") {
    const TreeModel t = build_tree(3, 1.0);
    std::vector<double> g(8, 0.0);
    CHECK_THROWS_AS(tree_condexp(t, 4, g, 1), ContractError);
}

TEST_CASE("constant target projects to the constant") {
    const RegressionBasis basis = make_basis("poly1", 0.0);
    std::vector<double> states = {0.3, -1.2, 0.7, 2.0, -0.5};
    std::vector<double> targets(5, 4.5);
    const CondExpEstimate est = fit_condexp(states, 1, targets, 1, basis);
    for (double f : est.fitted) CHECK(f == doctest::Approx(4.5).epsilon(1e-12));
}

TEST_CASE("target in the span is reproduced with zero residual") {
    const RegressionBasis basis = make_basis("poly1", 0.0);
    std::vector<double> states = {0.3, -1.2, 0.7, 2.0, -0.5, 1.1};
    std::vector<double> targets(states);
    const CondExpEstimate est = fit_condexp(states, 1, targets, 1, basis);
    for (std::size_t i = 0; i < targets.size(); ++i)
        CHECK(est.fitted[i] == doctest::Approx(targets[i]).epsilon(1e-12));
    CHECK(est.residual_second_moment <= 1e-20);
}

TEST_CASE("indicator basis on tree atoms reproduces the exact oracle") {
    // depth-3 tree enumerated as the ensemble, indicator basis over W_t
    // atoms, target W_T: the conditional expectation is a function of W_t,
    // so the atom means coincide with the node averages
    const TreeModel t = build_tree(3, 1.0);
    const RegressionBasis basis = make_basis("indicator-tree", 0.0);
    std::vector<double> wt(static_cast<std::size_t>(t.leaves()));
    for (long leaf = 0; leaf < t.leaves(); ++leaf)
        wt[static_cast<std::size_t>(leaf)] = t.value(leaf, 3);

    for (int level = 0; level <= 3; ++level) {
        const std::vector<double> states = walk_states(t, level);
        const CondExpEstimate est = fit_condexp(states, 1, wt, 1, basis);
        const std::vector<double> oracle = tree_condexp_leafwise(t, level, wt, 1);
        for (std::size_t i = 0; i < oracle.size(); ++i)
            CHECK(est.fitted[i] == doctest::Approx(oracle[i]).epsilon(1e-14));
    }
}

TEST_CASE("full prefix indicator basis equals tree_condexp for any target") {
    const RegressionBasis basis = make_basis("indicator-tree", 0.0);
    for (int depth : {4, 7, 10}) {
        const TreeModel t = build_tree(depth, 1.0);
        std::mt19937_64 rng(static_cast<std::uint64_t>(depth));
        std::uniform_real_distribution<double> u(-2.0, 2.0);
        std::vector<double> g(static_cast<std::size_t>(t.leaves()));
        for (double& v : g) v = u(rng);
        for (int level : {0, 1, depth / 2, depth}) {
            const std::vector<double> states = prefix_states(t, level);
            const CondExpEstimate est = fit_condexp(states, 1, g, 1, basis);
            const std::vector<double> oracle = tree_condexp_leafwise(t, level, g, 1);
            for (std::size_t i = 0; i < oracle.size(); ++i)
                CHECK(std::fabs(est.fitted[i] - oracle[i]) <= 1e-12);
        }
    }
}

TEST_CASE("projection property: residuals orthogonal to the basis") {
    const RegressionBasis basis = make_basis("poly3", 0.0);
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n(0.0, 1.0);
    const int P = 512;
    std::vector<double> states(P), targets(P);
    for (int p = 0; p < P; ++p) {
        states[static_cast<std::size_t>(p)] = n(rng);
        targets[static_cast<std::size_t>(p)] =
            std::sin(states[static_cast<std::size_t>(p)]) + 0.1 * n(rng);
    }
    const CondExpEstimate est = fit_condexp(states, 1, targets, 1, basis);

    // normal equations: sum_p phi_b(x_p) (y_p - fitted_p) = 0
    double scale = 0.0;
    for (int p = 0; p < P; ++p)
        scale += targets[static_cast<std::size_t>(p)] * targets[static_cast<std::size_t>(p)];
    for (int deg = 0; deg <= 3; ++deg) {
        double dot = 0.0;
        for (int p = 0; p < P; ++p) {
            const double phi = std::pow(states[static_cast<std::size_t>(p)], deg);
            dot += phi * (targets[static_cast<std::size_t>(p)] -
                          est.fitted[static_cast<std::size_t>(p)]);
        }
        CHECK(std::fabs(dot) <= 1e-10 * (1.0 + scale));
    }

    // contraction: fitted second moment never exceeds the target's
    double t2 = 0.0, f2 = 0.0;
    for (int p = 0; p < P; ++p) {
        t2 += targets[static_cast<std::size_t>(p)] * targets[static_cast<std::size_t>(p)];
        f2 += est.fitted[static_cast<std::size_t>(p)] * est.fitted[static_cast<std::size_t>(p)];
    }
    CHECK(f2 <= t2 * (1.0 + 1e-12));
}

TEST_CASE("fit is linear in the targets") {
    const RegressionBasis basis = make_basis("poly2", 1e-8);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    const int P = 256;
    std::vector<double> states(P), u(P), v(P), combo(P);
    for (int p = 0; p < P; ++p) {
        states[static_cast<std::size_t>(p)] = n(rng);
        u[static_cast<std::size_t>(p)] = n(rng);
        v[static_cast<std::size_t>(p)] = n(rng);
        combo[static_cast<std::size_t>(p)] =
            2.5 * u[static_cast<std::size_t>(p)] - 0.75 * v[static_cast<std::size_t>(p)];
    }
    const auto fu = fit_condexp(states, 1, u, 1, basis).fitted;
    const auto fv = fit_condexp(states, 1, v, 1, basis).fitted;
    const auto fc = fit_condexp(states, 1, combo, 1, basis).fitted;
    for (int p = 0; p < P; ++p) {
        const double expected =
            2.5 * fu[static_cast<std::size_t>(p)] - 0.75 * fv[static_cast<std::size_t>(p)];
        CHECK(fc[static_cast<std::size_t>(p)] ==
              doctest::Approx(expected).epsilon(1e-10).scale(1.0));
    }
}

TEST_CASE("singular normal matrix at ridge zero advises a positive ridge") {
    const RegressionBasis basis = make_basis("poly3", 0.0);
    // constant states: every monomial column is constant, rank 1
    std::vector<double> states(16, 1.0);
    std::vector<double> targets(16, 2.0);
    CHECK_THROWS_WITH_AS(fit_condexp(states, 1, targets, 1, basis),
                         doctest::Contains("positive ridge"), NumericalError);
    // a positive ridge makes the same fit well-posed
    const RegressionBasis ridged = make_basis("poly3", 1e-8);
    CHECK_NOTHROW(fit_condexp(states, 1, targets, 1, ridged));
}

TEST_CASE("too few paths for the basis is a config error") {
    const RegressionBasis basis = make_basis("poly3", 1e-8);
    std::vector<double> states = {0.1, 0.2};
    std::vector<double> targets = {1.0, 2.0};
    CHECK_THROWS_AS(fit_condexp(states, 1, targets, 1, basis), ConfigError);
}

TEST_CASE("basis names") {
    CHECK(make_basis("poly2", 0.0).degree == 2);
    CHECK(make_basis("indicator-tree", 0.0).kind == RegressionBasis::Kind::indicator);
    CHECK_THROWS_AS(make_basis("poly9", 0.0), ConfigError);
    CHECK(poly_basis_size(3, 1) == 4);
    CHECK(poly_basis_size(3, 2) == 10);
    CHECK(poly_basis_size(2, 3) == 10);
}

TEST_CASE("kernel extraction: increments of W give the unit kernel") {
    const TreeModel t = build_tree(6, 1.0);
    TreeExactEngine engine(t);
    const double dt = t.dt();
    for (int k : {0, 2, 5}) {
        std::vector<double> dM(static_cast<std::size_t>(t.leaves()));
        std::vector<double> dW(static_cast<std::size_t>(t.leaves()));
        for (long leaf = 0; leaf < t.leaves(); ++leaf) {
            dW[static_cast<std::size_t>(leaf)] = t.increment(leaf, k);
            dM[static_cast<std::size_t>(leaf)] = t.increment(leaf, k);
        }
        for (double z : extract_Z(dM, 1, dW, 1, dt, engine, k))
            CHECK(z == doctest::Approx(1.0).epsilon(1e-13));

        // linearity: M = c W gives the constant kernel c
        for (double& v : dM) v *= -2.5;
        for (double z : extract_Z(dM, 1, dW, 1, dt, engine, k))
            CHECK(z == doctest::Approx(-2.5).epsilon(1e-13));
    }
}

TEST_CASE("kernel extraction recovers 2 W_t for the squared walk") {
    // M_k = W_k^2 - t_k: on the tree, dM * dW / dt averages to 2 W_t at
    // every node, the exact representation kernel
    const TreeModel t = build_tree(8, 1.0);
    TreeExactEngine engine(t);
    const double dt = t.dt();
    for (int k : {0, 3, 7}) {
        std::vector<double> dM(static_cast<std::size_t>(t.leaves()));
        std::vector<double> dW(static_cast<std::size_t>(t.leaves()));
        for (long leaf = 0; leaf < t.leaves(); ++leaf) {
            const double w = t.value(leaf, k);
            const double wn = t.value(leaf, k + 1);
            dM[static_cast<std::size_t>(leaf)] = (wn * wn - (k + 1) * dt) - (w * w - k * dt);
            dW[static_cast<std::size_t>(leaf)] = t.increment(leaf, k);
        }
        const std::vector<double> z = extract_Z(dM, 1, dW, 1, dt, engine, k);
        for (long leaf = 0; leaf < t.leaves(); ++leaf)
            CHECK(z[static_cast<std::size_t>(leaf)] ==
                  doctest::Approx(2.0 * t.value(leaf, k)).epsilon(1e-12).scale(1.0));
    }
}

TEST_CASE("kernel extraction requires positive dt") {
    std::vector<double> dM = {1.0};
    std::vector<double> dW = {1.0};
    std::vector<double> states = {0.0};
    CHECK_THROWS_AS(extract_Z(dM, 1, dW, 1, 0.0, states, 1, make_basis("poly1", 1e-8)),
                    ContractError);
}
