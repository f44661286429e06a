#pragma once

#include "bsde/stochastic_basis.hpp"

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bsde {

/// Least-squares basis over the per-node regression state.
///   poly1|poly2|poly3  all monomials up to the given total degree,
///                      constant included;
///   indicator-tree     one indicator per distinct observed state vector
///                      (exact bit equality), the finite-model oracle
///                      basis. Meaningful only on ensembles whose states
///                      take finitely many values.
/// The ridge is relative: each basis function is penalized by
/// ridge * (its sample second moment).
struct RegressionBasis {
    enum class Kind { poly, indicator };
    Kind kind = Kind::poly;
    int degree = 3;
    double ridge = 1e-8;
    std::string name = "poly3";
};

RegressionBasis make_basis(const std::string& name, double ridge);

/// Monomial count of a poly basis on `state_dim` coordinates.
int poly_basis_size(int degree, int state_dim);

struct CondExpEstimate {
    int paths = 0;
    int target_dim = 0;
    int basis_size = 0;
    std::vector<double> fitted;       // [paths][target_dim]
    std::vector<double> coefficients; // [basis_size][target_dim]
    double residual_second_moment = 0.0;
};

/// Least-squares projection of per-path targets onto the basis evaluated
/// at the per-path states. Throws NumericalError for a singular normal
/// matrix at ridge 0 (the message suggests a positive ridge).
CondExpEstimate fit_condexp(std::span<const double> states, int state_dim,
                            std::span<const double> targets, int target_dim,
                            const RegressionBasis& basis);

/// Exact conditional expectation on the tree: value of each level-`level`
/// node is the equally-weighted average of its descendant leaves.
/// Returns [2^level][width].
std::vector<double> tree_condexp(const TreeModel& tree, int level,
                                 std::span<const double> leaf_values, int width);

/// Same, broadcast back to the leaves: each leaf carries its node value.
std::vector<double> tree_condexp_leafwise(const TreeModel& tree, int level,
                                          std::span<const double> leaf_values, int width);

/// Engine interface used by the induction and the diagnostics: projects
/// per-path targets onto the information available at a grid node.
class CondExpEngine {
public:
    virtual ~CondExpEngine() = default;
    virtual int paths() const = 0;
    virtual std::vector<double> project(int node, std::span<const double> targets,
                                        int target_dim) = 0;
    virtual std::string describe() const = 0;
};

/// Regression-backed engine bound to a per-node state table.
class RegressionEngine : public CondExpEngine {
public:
    /// states_per_node[k] holds paths*state_dim doubles for grid node k.
    RegressionEngine(std::vector<std::vector<double>> states_per_node, int state_dim,
                     RegressionBasis basis);
    ~RegressionEngine() override;

    int paths() const override;
    std::vector<double> project(int node, std::span<const double> targets,
                                int target_dim) override;
    std::string describe() const override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Exact engine over an enumerated tree ensemble (path index = leaf index).
class TreeExactEngine : public CondExpEngine {
public:
    explicit TreeExactEngine(TreeModel tree);

    int paths() const override;
    std::vector<double> project(int node, std::span<const double> targets,
                                int target_dim) override;
    std::string describe() const override;

private:
    TreeModel tree_;
};

/// Representation-kernel estimate from martingale increments over one
/// step: Z[j][l] is the projection of dM_j * dW_l / dt on the time-`node`
/// state. Returns [paths][d][m].
std::vector<double> extract_Z(std::span<const double> dM, int d, std::span<const double> dW,
                              int m, double dt, CondExpEngine& engine, int node);

/// Convenience overload fitting against explicit states.
std::vector<double> extract_Z(std::span<const double> dM, int d, std::span<const double> dW,
                              int m, double dt, std::span<const double> states, int state_dim,
                              const RegressionBasis& basis);

} // namespace bsde
