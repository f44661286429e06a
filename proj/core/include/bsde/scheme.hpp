#pragma once

#include "bsde/condexp.hpp"
#include "bsde/problem_model.hpp"
#include "bsde/stochastic_basis.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace bsde {

/// Which conditional-expectation engine backs the induction.
struct EngineConfig {
    enum class Kind { regression, tree_exact };
    Kind kind = Kind::regression;
    std::string basis = "poly3";
    double ridge = 1e-8;
};

/// Per-path, per-node arrays produced by the backward induction, plus
/// provenance. Layouts: Y, U, V, M are [P][N+1][d]; Z and Ztilde are
/// [P][N][d][m] (one entry per step, none at the terminal node).
struct SchemeOutput {
    TimeGrid grid;
    int delay_steps = 1; // D actually used by the run
    int y_dim = 1;
    int w_dim = 1;
    int paths = 0;

    std::vector<double> Y;
    std::vector<double> Z;
    std::vector<double> Ztilde;
    std::vector<double> U;
    std::vector<double> V; // running stochastic integral of Z against W
    std::vector<double> M; // V shifted by the mean of xi + sum f dt

    std::string problem;
    std::string engine;
    std::uint64_t seed = 0;

    std::size_t node_index(int p, int k, int j) const {
        return (static_cast<std::size_t>(p) * grid.nodes() + k) * y_dim + j;
    }
    std::size_t step_index(int p, int k, int j, int l) const {
        return ((static_cast<std::size_t>(p) * grid.steps + k) * y_dim + j) * w_dim + l;
    }

    double y(int p, int k, int j = 0) const { return Y[node_index(p, k, j)]; }
    double u(int p, int k, int j = 0) const { return U[node_index(p, k, j)]; }
    double v(int p, int k, int j = 0) const { return V[node_index(p, k, j)]; }
    double m(int p, int k, int j = 0) const { return M[node_index(p, k, j)]; }
    double z(int p, int k, int j = 0, int l = 0) const { return Z[step_index(p, k, j, l)]; }
    double ztilde(int p, int k, int j = 0, int l = 0) const {
        return Ztilde[step_index(p, k, j, l)];
    }
};

/// Builds the per-node regression state table for a problem over an
/// ensemble (also used by the diagnostics).
std::vector<std::vector<double>> build_state_table(const ProblemSpec& problem,
                                                   const PathEnsemble& ensemble);

/// Forward states X for every path, [P][N+1][x_dim] (empty when x_dim = 0).
std::vector<double> build_forward_states(const ProblemSpec& problem,
                                         const PathEnsemble& ensemble);

/// Terminal values xi, [P][d].
std::vector<double> evaluate_terminal(const ProblemSpec& problem, const PathEnsemble& ensemble,
                                      std::span<const double> forward_states);

/// Instantiates the configured engine over the problem's state table.
std::unique_ptr<CondExpEngine> make_engine(const ProblemSpec& problem,
                                           const PathEnsemble& ensemble,
                                           const EngineConfig& config);

/// Backward induction over delay blocks of D steps, from T down to 0.
/// Per node k (descending):
///   Ztilde_k = E-hat[Z_{k+D} | node k]             (0 within D steps of T)
///   Y_k      = E-hat[xi + sum_{s>=k+D} f_s dt | node k]
///   U_k      = E-hat[sum_{k<=s<k+D} f_s dt | node k]
///   Z_k      from the one-step martingale increment
///            dM_k = (Y+U)_{k+1} - (Y+U)_k + f_k dt
///            via the increment-covariance identity E-hat[dM.dW]/dt.
/// f is always evaluated at (t_k, X_k, Y_k, Ztilde_k) with left-endpoint
/// time integrals; beyond T it is zero by convention. V accumulates
/// Z dW forward from 0; M = V + mean(xi + sum f dt).
SchemeOutput run_scheme(const ProblemSpec& problem, const PathEnsemble& ensemble,
                        int delay_steps, const EngineConfig& config);

struct ResidualReport {
    double max_abs = 0.0;
    int argmax_path = 0;
    int argmax_node = 0;
    std::vector<double> mean_norm_profile; // [N+1], E-hat||R_t||
};

/// Pathwise defect of the closed-loop equation
///   R_k = Y_k - (xi + sum_{s>=k} f_s dt - (V_N - V_k) - U_k),
/// with f evaluated on the stored (Y, Ztilde) arrays and xi re-evaluated
/// from the problem. Exactly zero under an exact conditional-expectation
/// engine; reports the regression-error budget otherwise.
ResidualReport residual_bsde(const SchemeOutput& output, const ProblemSpec& problem,
                             const PathEnsemble& ensemble);

/// F_t = sum_{s>=t} f(s, X_s, Y_s, Ztilde_s) dt as a [P][N+1][d] array
/// (F_N = 0), with f evaluated on the stored output arrays.
std::vector<double> generator_tail_integral(const SchemeOutput& output,
                                            const ProblemSpec& problem,
                                            const PathEnsemble& ensemble);

struct DelayGapReport {
    double shift_l2_mean = 0.0; // E-hat sum ||Ztilde - Z||^2 dt
    double shift_l2_se = 0.0;
    double weighted_mean = 0.0; // E-hat || sum alpha (Ztilde - Z) dt ||
    double weighted_se = 0.0;
};

/// Delay defect statistics over the full step range as stored in the
/// output (the scheme leaves Ztilde = 0 within D steps of T). Requires an
/// affine generator for the alpha-weighted part.
DelayGapReport delay_shift_gap(const SchemeOutput& output, const ProblemSpec& problem,
                               const PathEnsemble& ensemble);

} // namespace bsde
