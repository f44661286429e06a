#pragma once

#include "bsde/condexp.hpp"
#include "bsde/scheme.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace bsde {

enum class Verdict { pass, fail, info };
const char* verdict_name(Verdict v);

/// One named statistic with its provenance. `estimate`/`threshold`
/// semantics depend on the id and are documented per operation; margin
/// entries pass when estimate + 2 * std_error clears the threshold.
struct DiagnosticEntry {
    std::string id;
    int delay_steps = 0;
    std::string time_label = "global"; // "global" or a grid time
    double estimate = 0.0;
    double std_error = 0.0;
    std::optional<double> threshold;
    Verdict verdict = Verdict::info;
    long sample_size = 0;
    std::uint64_t seed = 0;
};

struct DiagnosticsReport {
    std::vector<DiagnosticEntry> entries;

    void add(DiagnosticEntry e) { entries.push_back(std::move(e)); }
    void extend(const DiagnosticsReport& other);
    bool all_passed() const; // no fail entries
};

/// Flat CSV: statistic_id, D, t, estimate, std_error, threshold, verdict.
void write_csv(const DiagnosticsReport& report, std::ostream& os);
/// One object per statistic, line-oriented.
void write_text(const DiagnosticsReport& report, std::ostream& os);

double sample_mean(std::span<const double> xs);
void sample_mean_se(std::span<const double> xs, double& mean, double& se);

// --- second-moment statistics ------------------------------------------

/// E-hat sup_t||Y||^2, E-hat int ||Z||^2 dt, E-hat int ||Ztilde||^2 dt,
/// E-hat sup_t||V_T - V_t||^2, all informational with standard errors.
DiagnosticsReport l2_bounds(const SchemeOutput& output);

/// Across a delay sweep: pass iff every statistic stays below twice its
/// median over the sweep (no blow-up heuristic).
DiagnosticsReport l2_bounds_sweep(std::span<const SchemeOutput> outputs);

/// Energy inequality with the proof-derived constants: with Ytilde = Y+U,
///   E int_t^T ||Z||^2 <= C_A E int_t^T ||Ytilde||^2 + C_B,
///   C_A = 4 K lambda^2 / (1 - 2K/lambda^2),
///   C_B = (E||xi||^2 + 2KT/lambda^2) / (1 - 2K/lambda^2),
/// checked at t = 0 and at every block boundary. Entries carry the paired
/// margin RHS - LHS; pass when margin >= -2 SE. Requires lambda^2 > 2K.
DiagnosticsReport z_energy_inequality(const SchemeOutput& output, double K, double lambda2);

// --- delay decay --------------------------------------------------------

struct UDecayRow {
    int delay_steps = 0;
    double h = 0.0;
    double estimate = 0.0; // E-hat sup_t ||U_t||^q
    double std_error = 0.0;
};

struct UDecayStudy {
    double q = 1.0;
    std::vector<UDecayRow> rows;  // ascending h
    double slope = 0.0;           // log estimate vs log h
    double slope_se = 0.0;
    double reference_rate = 0.0;  // h^{(2-q')/2} exponent for q' = (q+2)/2
    bool strictly_decreasing = false; // in 1/h, i.e. increasing with h
    Verdict verdict = Verdict::info;  // pass iff slope > 0 at 95% confidence
    bool degenerate_zero = false;     // all estimates exactly zero (f == 0)
};

UDecayStudy u_decay_from_outputs(std::span<const SchemeOutput> outputs, double q);

/// Runs the scheme per delay value over the shared ensemble, then fits
/// the decay table. Requires at least 3 delay values.
UDecayStudy u_decay_study(const ProblemSpec& problem, const PathEnsemble& ensemble,
                          std::span<const int> delay_list, double q,
                          const EngineConfig& engine);

// --- conditional variation and Condition UT -----------------------------

struct CondVarEstimate {
    double estimate = 0.0;
    double std_error = 0.0;
    std::vector<double> per_path; // E-hat of this is `estimate`
};

/// CV_pi(X) = E-hat[ ||X_T|| + sum_i ||E-hat[X_{t_{i+1}} - X_{t_i} | t_i]|| ]
/// over the given partition (grid node indices, must contain N).
CondVarEstimate conditional_variation(std::span<const double> values, int d,
                                      const TimeGrid& grid,
                                      std::span<const int> partition, CondExpEngine& engine);

struct CvBound {
    double value = 0.0;
    double std_error = 0.0;
};

/// Partition-independent quasimartingale bound for CV(Y):
///   E-hat||xi|| + K (T + sqrt(T) (E-hat int ||Ztilde||^2 dt)^{1/2}),
/// with a delta-method standard error.
CvBound cv_quasimartingale_bound(const SchemeOutput& output, double K);

struct UtStatistics {
    double adversarial_mean = 0.0; // E-hat of int H dX with the sign control
    double adversarial_se = 0.0;
    double quantile50 = 0.0; // over |int H dX| for random +-1 step controls
    double quantile99 = 0.0;
};

/// (i) adversarial elementary control: H_i = sign of the fitted
/// E-hat[dX | t_i] per coordinate (|H| <= 1, predictable);
/// (ii) tail quantiles of int H dX over `random_controls` deterministic
/// +-1 step controls.
UtStatistics ut_statistic(std::span<const double> values, int d, const TimeGrid& grid,
                          CondExpEngine& engine, int random_controls, std::uint64_t seed);

struct AldousTailRow {
    double radius = 0.0;
    double tail_probability = 0.0; // P-hat(sup_t ||F_t|| >= radius)
};

struct AldousIncrementRow {
    double delta = 0.0;
    double value = 0.0; // sup over node pairs |t_a - t_b| <= delta of E-hat||F_a - F_b||
    double std_error = 0.0;
    int node_a = 0;
    int node_b = 0;
};

struct AldousStatistics {
    std::vector<AldousTailRow> tail;       // (A)
    std::vector<AldousIncrementRow> bcurve; // (B), deterministic-time proxy
};

/// radii: empty selects quantiles of the observed sup automatically.
AldousStatistics aldous_statistics(std::span<const double> values, int d,
                                   const TimeGrid& grid, std::span<const double> radii,
                                   std::span<const double> deltas);

// --- martingale and orthogonality residuals ------------------------------

struct MartingaleResidualCell {
    int node_a = 0;
    int node_b = 0;
    std::string test_fn;
    int coord = 0;
    double mean = 0.0;
    double std_error = 0.0;
    double z = 0.0;
    bool pass = false; // |mean| <= max(3 SE, exactness floor)
};

struct MartingaleResidualTable {
    std::vector<MartingaleResidualCell> cells;
    double pass_fraction = 0.0;
    Verdict verdict = Verdict::info; // pass iff >= 95% of cells pass
};

/// Tests E-hat[(X_{t_b} - X_{t_a}) h(history_{t_a})] = 0 for a family of
/// bounded test functions: the constant plus products of tanh of history
/// coordinates over at most 3 lookback nodes.
MartingaleResidualTable martingale_residuals(std::span<const double> process, int d,
                                             std::span<const double> history, int history_dim,
                                             const TimeGrid& grid,
                                             std::span<const std::pair<int, int>> node_pairs);

/// Node pairs (t, t + s) spread over the grid, for the residual tables.
std::vector<std::pair<int, int>> default_node_pairs(const TimeGrid& grid);

struct WeakLimitDecomposition {
    int y_dim = 1;
    int w_dim = 1;
    int paths = 0;
    int steps = 0;
    std::vector<double> L;  // [P][N+1][d], V - V_0 - sum Z dW
    std::vector<double> MZ; // [P][N+1][d], the stochastic-integral part
};

/// L_t = V_t - V_0 - sum_{s<t} Z_s dW_s. L_0 = 0 by construction; feed L
/// (and the coordinate products L^i W^j) to martingale_residuals for the
/// martingale and orthogonality tests.
WeakLimitDecomposition decompose_L(std::span<const double> V, std::span<const double> Z,
                                   std::span<const double> increments, int paths, int steps,
                                   int d, int m);

/// Coordinate product process L^i W^j as a [P][N+1][1] array.
std::vector<double> coordinate_product(std::span<const double> a, int a_dim, int i,
                                       std::span<const double> b, int b_dim, int j, int paths,
                                       int nodes);

// --- stabilization of per-time laws --------------------------------------

struct LawDistanceRow {
    int delay_a = 0;
    int delay_b = 0;
    int node = 0;
    std::string component; // "Y" or "V"
    int coord = 0;
    double ks_distance = 0.0;
};

/// Pairwise per-time Kolmogorov-Smirnov distances of the empirical laws
/// of (Y_t, V_t) across a delay sweep. Informational.
std::vector<LawDistanceRow> law_stabilization(std::span<const SchemeOutput> outputs,
                                              std::span<const int> nodes);

double ks_distance(std::span<const double> a, std::span<const double> b);

} // namespace bsde
