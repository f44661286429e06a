#pragma once

#include "bsde/stochastic_basis.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace bsde {

/// Generator f(t, x, y, z) with values in R^d, z a d x m matrix. The
/// affine route evaluates alpha(t,x,y) . z + beta(t,x,y), where alpha is a
/// d x d x m coefficient tensor contracted over both z indices:
///   (alpha . z)_i = sum_{j,k} alpha[i][j][k] * z[j][k].
/// Demo generators outside the affine class supply `nonaffine_eval`
/// instead. The declared growth constant is checked, never trusted.
struct GeneratorSpec {
    int y_dim = 1; // d
    int w_dim = 1; // m
    int x_dim = 0; // coordinates of the forward state fed to alpha/beta

    double growth_K = 0.0;
    bool affine = true;

    // writes y_dim*y_dim*w_dim coefficients; null means alpha == 0
    std::function<void(double t, std::span<const double> x, std::span<const double> y,
                       std::span<double> alpha)>
        alpha;
    // writes y_dim values; null means beta == 0
    std::function<void(double t, std::span<const double> x, std::span<const double> y,
                       std::span<double> beta)>
        beta;
    // direct evaluator for non-affine demos; ignored when `affine`
    std::function<void(double t, std::span<const double> x, std::span<const double> y,
                       std::span<const double> z, std::span<double> out)>
        nonaffine_eval;

    int z_size() const { return y_dim * w_dim; }
    int alpha_size() const { return y_dim * y_dim * w_dim; }
};

void eval_generator(const GeneratorSpec& gen, double t, std::span<const double> x,
                    std::span<const double> y, std::span<const double> z,
                    std::span<double> out);

/// One probe point for the hypothesis checkers.
struct GeneratorProbe {
    double t = 0.0;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> z;  // primary z (d*m)
    std::vector<double> z2; // second z for the affinity midpoint test
};

struct GrowthReport {
    double max_excess = 0.0; // max over the cloud of ||f|| - K(1+||z||)
    GeneratorProbe argmax;
    double empirical_sup_f = 0.0; // sup of ||f|| over the cloud, reported only
    bool pass = false;
};

/// Checks ||f(t,x,y,z)|| <= K (1 + ||z||) over the probe cloud.
GrowthReport check_growth(const GeneratorSpec& gen, std::span<const GeneratorProbe> cloud,
                          double K);

struct AffinityReport {
    double max_defect = 0.0; // max of ||f(z1)+f(z2)-2 f((z1+z2)/2)||
    double worst_tolerance = 0.0;
    GeneratorProbe argmax;
    bool pass = false;
};

/// Midpoint test for affinity in z: exact affine maps have zero defect.
/// Tolerance per probe: 1e-9 * (1 + ||f(z1)|| + ||f(z2)||).
AffinityReport check_affine_in_z(const GeneratorSpec& gen,
                                 std::span<const GeneratorProbe> probes);

/// A complete problem instance: generator, terminal value xi as a
/// functional of the full paths, adapted forward state X built from the
/// W prefix, and the finite-dimensional regression state.
struct ProblemSpec {
    std::string name;
    std::string description;
    GeneratorSpec generator;
    int state_dim = 1;

    /// Fills x_path [(N+1) * x_dim] from w_path [(N+1) * m]; the first
    /// k+1 states may depend only on the first k+1 W values.
    std::function<void(const TimeGrid&, std::span<const double> w_path,
                       std::span<double> x_path)>
        forward;

    /// xi in R^d from the full W and X paths.
    std::function<void(const TimeGrid&, std::span<const double> w_path,
                       std::span<const double> x_path, std::span<double> xi)>
        terminal;

    /// Regression inputs at node k (the time coordinate is implicit:
    /// every fit is per-node).
    std::function<void(const TimeGrid&, int k, std::span<const double> w_path,
                       std::span<const double> x_path, std::span<double> state)>
        state_features;
};

/// The shipped catalogue:
///   P1  f == 0,               xi = W_T          (Y_t = W_t, Z = 1)
///   P2  f = y,                xi = W_T          (Y_t = e^{T-t} W_t)
///   P3  f = sqrt|y|,          xi = 0            (zero fixed point; the
///                                                t0-family of alternatives)
///   P4  f = arctan(y) + c z,  xi = tanh(W_T)    (bounded alpha/beta)
///   P4b f = arctan(y),        xi = tanh(W_T)    (pointwise-bounded f)
///   P5  d=1, m=2 affine with a running-max forward state
const std::vector<ProblemSpec>& builtin_problems();
const ProblemSpec& find_problem(const std::string& name);

/// Growth constant certified for P4/P4b: sup|arctan| = pi/2 dominates
/// the z coefficient.
double p4_growth_constant();

/// z coefficient of P4.
double p4_z_coefficient();

/// Deterministic probe cloud used by the checkers and tests.
std::vector<GeneratorProbe> sample_probe_cloud(const GeneratorSpec& gen, int count,
                                               std::uint64_t seed, double scale = 2.0);

} // namespace bsde
