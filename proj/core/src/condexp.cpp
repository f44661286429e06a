#include "bsde/condexp.hpp"

#include "bsde/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <unordered_map>

namespace bsde {

namespace {

void require(bool cond, const char* what) {
    if (!cond) throw ContractError(what);
}

// Multi-indices of total degree <= degree over `dim` coordinates, in a
// fixed degree-then-lexicographic order. Index 0 is the constant.
std::vector<std::vector<int>> monomial_exponents(int degree, int dim) {
    std::vector<std::vector<int>> out;
    std::vector<int> current(static_cast<std::size_t>(dim), 0);
    // enumerate by total degree
    for (int total = 0; total <= degree; ++total) {
        // generate all exponent vectors with sum == total
        std::vector<int> expo(static_cast<std::size_t>(dim), 0);
        // iterative odometer over compositions
        std::function<void(int, int)> rec = [&](int pos, int remaining) {
            if (pos == dim - 1) {
                expo[static_cast<std::size_t>(pos)] = remaining;
                out.push_back(expo);
                return;
            }
            for (int e = remaining; e >= 0; --e) {
                expo[static_cast<std::size_t>(pos)] = e;
                rec(pos + 1, remaining - e);
            }
        };
        if (dim == 0) {
            if (total == 0) out.push_back({});
        } else {
            rec(0, total);
        }
    }
    return out;
}

struct AtomIndex {
    std::vector<int> atom_of_path; // [paths]
    std::vector<int> atom_count;   // [atoms]
    int atoms = 0;
};

// Groups paths by exact bit equality of their state vectors; atom ids
// follow first occurrence in path order, so the grouping is deterministic.
AtomIndex build_atoms(std::span<const double> states, int state_dim, int paths) {
    AtomIndex idx;
    idx.atom_of_path.resize(static_cast<std::size_t>(paths));
    std::unordered_map<std::string, int> seen;
    seen.reserve(static_cast<std::size_t>(paths));
    for (int p = 0; p < paths; ++p) {
        std::string key(reinterpret_cast<const char*>(states.data() +
                                                      static_cast<std::size_t>(p) * state_dim),
                        sizeof(double) * static_cast<std::size_t>(state_dim));
        auto [it, inserted] = seen.emplace(std::move(key), idx.atoms);
        if (inserted) {
            idx.atom_count.push_back(0);
            ++idx.atoms;
        }
        idx.atom_of_path[static_cast<std::size_t>(p)] = it->second;
        ++idx.atom_count[static_cast<std::size_t>(it->second)];
    }
    return idx;
}

// Everything needed to project arbitrary targets for one fixed state set.
struct Projector {
    RegressionBasis basis;
    int paths = 0;
    int state_dim = 0;

    // poly route
    Eigen::MatrixXd phi; // paths x B
    Eigen::LDLT<Eigen::MatrixXd> solver;

    // indicator route
    AtomIndex atoms;

    int basis_size() const {
        return basis.kind == RegressionBasis::Kind::poly ? static_cast<int>(phi.cols())
                                                         : atoms.atoms;
    }
};

Projector build_projector(std::span<const double> states, int state_dim, int paths,
                          const RegressionBasis& basis) {
    require(paths > 0, "fit_condexp: no paths");
    require(state_dim >= 0, "fit_condexp: negative state dimension");
    for (double s : states)
        if (!std::isfinite(s)) throw NumericalError("fit_condexp: non-finite state value");

    Projector proj;
    proj.basis = basis;
    proj.paths = paths;
    proj.state_dim = state_dim;

    if (basis.kind == RegressionBasis::Kind::indicator) {
        proj.atoms = build_atoms(states, state_dim, paths);
        return proj;
    }

    const auto exponents = monomial_exponents(basis.degree, state_dim);
    const int B = static_cast<int>(exponents.size());
    if (paths < B)
        throw ConfigError("fit_condexp: " + std::to_string(paths) + " paths for " +
                          std::to_string(B) + " basis functions");

    proj.phi.resize(paths, B);
    for (int p = 0; p < paths; ++p) {
        const double* s = states.data() + static_cast<std::size_t>(p) * state_dim;
        for (int b = 0; b < B; ++b) {
            double v = 1.0;
            for (int c = 0; c < state_dim; ++c) {
                const int e = exponents[static_cast<std::size_t>(b)][static_cast<std::size_t>(c)];
                for (int rep = 0; rep < e; ++rep) v *= s[c];
            }
            proj.phi(p, b) = v;
        }
    }

    Eigen::MatrixXd gram = proj.phi.transpose() * proj.phi;
    if (basis.ridge > 0.0) {
        for (int b = 0; b < B; ++b) {
            const double second_moment = std::max(gram(b, b) / paths, 1e-30);
            gram(b, b) += basis.ridge * second_moment * paths;
        }
    } else {
        const Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
        if (lu.rank() < B)
            throw NumericalError(
                "fit_condexp: singular normal matrix at ridge 0; use a positive ridge");
    }
    proj.solver.compute(gram);
    if (proj.solver.info() != Eigen::Success)
        throw NumericalError("fit_condexp: normal-matrix factorization failed");
    return proj;
}

// fitted values plus coefficients for a block of targets
void project_targets(const Projector& proj, std::span<const double> targets, int target_dim,
                     std::vector<double>& fitted, std::vector<double>* coefficients) {
    const int P = proj.paths;
    require(static_cast<int>(targets.size()) == P * target_dim,
            "fit_condexp: target size mismatch");
    for (double t : targets)
        if (!std::isfinite(t)) throw NumericalError("fit_condexp: non-finite target value");

    fitted.assign(static_cast<std::size_t>(P) * target_dim, 0.0);

    if (proj.basis.kind == RegressionBasis::Kind::indicator) {
        const AtomIndex& atoms = proj.atoms;
        std::vector<double> sums(static_cast<std::size_t>(atoms.atoms) * target_dim, 0.0);
        for (int p = 0; p < P; ++p) {
            const int a = atoms.atom_of_path[static_cast<std::size_t>(p)];
            for (int j = 0; j < target_dim; ++j)
                sums[static_cast<std::size_t>(a) * target_dim + j] +=
                    targets[static_cast<std::size_t>(p) * target_dim + j];
        }
        // orthogonal indicator columns: the ridge only rescales the means
        const double shrink = 1.0 / (1.0 + proj.basis.ridge / P);
        for (int a = 0; a < atoms.atoms; ++a) {
            const double inv = shrink / atoms.atom_count[static_cast<std::size_t>(a)];
            for (int j = 0; j < target_dim; ++j)
                sums[static_cast<std::size_t>(a) * target_dim + j] *= inv;
        }
        for (int p = 0; p < P; ++p) {
            const int a = atoms.atom_of_path[static_cast<std::size_t>(p)];
            for (int j = 0; j < target_dim; ++j)
                fitted[static_cast<std::size_t>(p) * target_dim + j] =
                    sums[static_cast<std::size_t>(a) * target_dim + j];
        }
        if (coefficients) *coefficients = std::move(sums);
        return;
    }

    const int B = static_cast<int>(proj.phi.cols());
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> y(
        targets.data(), P, target_dim);
    const Eigen::MatrixXd rhs = proj.phi.transpose() * y;
    const Eigen::MatrixXd coeff = proj.solver.solve(rhs); // B x target_dim
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> out(
        fitted.data(), P, target_dim);
    out = proj.phi * coeff;
    if (coefficients) {
        coefficients->resize(static_cast<std::size_t>(B) * target_dim);
        Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> c(
            coefficients->data(), B, target_dim);
        c = coeff;
    }
}

} // namespace

RegressionBasis make_basis(const std::string& name, double ridge) {
    if (ridge < 0.0) throw ConfigError("ridge must be >= 0");
    RegressionBasis b;
    b.name = name;
    b.ridge = ridge;
    if (name == "poly1" || name == "poly2" || name == "poly3") {
        b.kind = RegressionBasis::Kind::poly;
        b.degree = name.back() - '0';
        return b;
    }
    if (name == "indicator-tree") {
        b.kind = RegressionBasis::Kind::indicator;
        b.degree = 0;
        return b;
    }
    throw ConfigError("unknown basis \"" + name +
                      "\" (expected poly1|poly2|poly3|indicator-tree)");
}

int poly_basis_size(int degree, int state_dim) {
    return static_cast<int>(monomial_exponents(degree, state_dim).size());
}

CondExpEstimate fit_condexp(std::span<const double> states, int state_dim,
                            std::span<const double> targets, int target_dim,
                            const RegressionBasis& basis) {
    const int P = state_dim > 0 ? static_cast<int>(states.size()) / state_dim
                                : static_cast<int>(targets.size()) / std::max(target_dim, 1);
    require(state_dim == 0 || static_cast<int>(states.size()) == P * state_dim,
            "fit_condexp: ragged state array");
    const Projector proj = build_projector(states, state_dim, P, basis);

    CondExpEstimate est;
    est.paths = P;
    est.target_dim = target_dim;
    project_targets(proj, targets, target_dim, est.fitted, &est.coefficients);
    est.basis_size = proj.basis_size();

    double rss = 0.0;
    for (std::size_t i = 0; i < est.fitted.size(); ++i) {
        const double r = targets[i] - est.fitted[i];
        rss += r * r;
    }
    est.residual_second_moment = rss / P;
    return est;
}

std::vector<double> tree_condexp(const TreeModel& tree, int level,
                                 std::span<const double> leaf_values, int width) {
    if (level < 0 || level > tree.depth)
        throw ContractError("tree_condexp: level out of range");
    const long leaves = tree.leaves();
    require(static_cast<long>(leaf_values.size()) == leaves * width,
            "tree_condexp: leaf value size mismatch");
    const long nodes = 1L << level;
    const long block = leaves >> level;
    std::vector<double> out(static_cast<std::size_t>(nodes) * width, 0.0);
    for (long n = 0; n < nodes; ++n) {
        double* acc = out.data() + static_cast<std::size_t>(n) * width;
        for (long leaf = n * block; leaf < (n + 1) * block; ++leaf)
            for (int j = 0; j < width; ++j)
                acc[j] += leaf_values[static_cast<std::size_t>(leaf) * width + j];
        for (int j = 0; j < width; ++j) acc[j] /= static_cast<double>(block);
    }
    return out;
}

std::vector<double> tree_condexp_leafwise(const TreeModel& tree, int level,
                                          std::span<const double> leaf_values, int width) {
    const std::vector<double> nodes = tree_condexp(tree, level, leaf_values, width);
    const long leaves = tree.leaves();
    std::vector<double> out(static_cast<std::size_t>(leaves) * width);
    for (long leaf = 0; leaf < leaves; ++leaf) {
        const long n = tree.node_of(leaf, level);
        for (int j = 0; j < width; ++j)
            out[static_cast<std::size_t>(leaf) * width + j] =
                nodes[static_cast<std::size_t>(n) * width + j];
    }
    return out;
}

struct RegressionEngine::Impl {
    std::vector<std::vector<double>> states;
    int state_dim = 0;
    RegressionBasis basis;
    int paths = 0;

    int cached_node = -1;
    Projector projector;

    const Projector& projector_for(int node) {
        if (node != cached_node) {
            projector = build_projector(states[static_cast<std::size_t>(node)], state_dim,
                                        paths, basis);
            cached_node = node;
        }
        return projector;
    }
};

RegressionEngine::RegressionEngine(std::vector<std::vector<double>> states_per_node,
                                   int state_dim, RegressionBasis basis)
    : impl_(std::make_unique<Impl>()) {
    require(!states_per_node.empty(), "RegressionEngine: empty state table");
    impl_->state_dim = state_dim;
    impl_->basis = std::move(basis);
    impl_->paths = state_dim > 0
                       ? static_cast<int>(states_per_node.front().size()) / state_dim
                       : 0;
    impl_->states = std::move(states_per_node);
}

RegressionEngine::~RegressionEngine() = default;

int RegressionEngine::paths() const { return impl_->paths; }

std::vector<double> RegressionEngine::project(int node, std::span<const double> targets,
                                              int target_dim) {
    if (node < 0 || node >= static_cast<int>(impl_->states.size()))
        throw ContractError("RegressionEngine: node out of range");
    std::vector<double> fitted;
    project_targets(impl_->projector_for(node), targets, target_dim, fitted, nullptr);
    return fitted;
}

std::string RegressionEngine::describe() const {
    return impl_->basis.name + " (ridge " + std::to_string(impl_->basis.ridge) + ")";
}

TreeExactEngine::TreeExactEngine(TreeModel tree) : tree_(tree) {}

int TreeExactEngine::paths() const { return static_cast<int>(tree_.leaves()); }

std::vector<double> TreeExactEngine::project(int node, std::span<const double> targets,
                                             int target_dim) {
    return tree_condexp_leafwise(tree_, node, targets, target_dim);
}

std::string TreeExactEngine::describe() const {
    return "tree-exact depth " + std::to_string(tree_.depth);
}

std::vector<double> extract_Z(std::span<const double> dM, int d, std::span<const double> dW,
                              int m, double dt, CondExpEngine& engine, int node) {
    if (!(dt > 0.0)) throw ContractError("extract_Z: dt must be > 0");
    const int P = engine.paths();
    require(static_cast<int>(dM.size()) == P * d, "extract_Z: dM size mismatch");
    require(static_cast<int>(dW.size()) == P * m, "extract_Z: dW size mismatch");
    std::vector<double> targets(static_cast<std::size_t>(P) * d * m);
    for (int p = 0; p < P; ++p)
        for (int j = 0; j < d; ++j)
            for (int l = 0; l < m; ++l)
                targets[(static_cast<std::size_t>(p) * d + j) * m + l] =
                    dM[static_cast<std::size_t>(p) * d + j] *
                    dW[static_cast<std::size_t>(p) * m + l] / dt;
    return engine.project(node, targets, d * m);
}

std::vector<double> extract_Z(std::span<const double> dM, int d, std::span<const double> dW,
                              int m, double dt, std::span<const double> states, int state_dim,
                              const RegressionBasis& basis) {
    if (!(dt > 0.0)) throw ContractError("extract_Z: dt must be > 0");
    const int P = state_dim > 0 ? static_cast<int>(states.size()) / state_dim : 0;
    require(static_cast<int>(dM.size()) == P * d, "extract_Z: dM size mismatch");
    require(static_cast<int>(dW.size()) == P * m, "extract_Z: dW size mismatch");
    std::vector<double> targets(static_cast<std::size_t>(P) * d * m);
    for (int p = 0; p < P; ++p)
        for (int j = 0; j < d; ++j)
            for (int l = 0; l < m; ++l)
                targets[(static_cast<std::size_t>(p) * d + j) * m + l] =
                    dM[static_cast<std::size_t>(p) * d + j] *
                    dW[static_cast<std::size_t>(p) * m + l] / dt;
    return fit_condexp(states, state_dim, targets, d * m, basis).fitted;
}

} // namespace bsde
