#include "bsde/problem_model.hpp"

#include "bsde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace bsde {

namespace {

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double a : v) s += a * a;
    return std::sqrt(s);
}

void require(bool cond, const char* what) {
    if (!cond) throw ContractError(what);
}

constexpr double kP4ZCoefficient = 0.5;

} // namespace

double p4_growth_constant() { return M_PI / 2.0; }
double p4_z_coefficient() { return kP4ZCoefficient; }

void eval_generator(const GeneratorSpec& gen, double t, std::span<const double> x,
                    std::span<const double> y, std::span<const double> z,
                    std::span<double> out) {
    require(static_cast<int>(y.size()) == gen.y_dim, "eval_generator: y dimension mismatch");
    require(static_cast<int>(z.size()) == gen.z_size(), "eval_generator: z dimension mismatch");
    require(static_cast<int>(out.size()) == gen.y_dim, "eval_generator: output dimension mismatch");
    require(static_cast<int>(x.size()) == gen.x_dim, "eval_generator: x dimension mismatch");

    if (!gen.affine) {
        require(static_cast<bool>(gen.nonaffine_eval),
                "eval_generator: non-affine generator without evaluator");
        gen.nonaffine_eval(t, x, y, z, out);
        return;
    }

    std::fill(out.begin(), out.end(), 0.0);
    if (gen.beta) gen.beta(t, x, y, out);
    if (gen.alpha) {
        thread_local std::vector<double> coeff;
        coeff.assign(static_cast<std::size_t>(gen.alpha_size()), 0.0);
        gen.alpha(t, x, y, coeff);
        const int d = gen.y_dim;
        const int m = gen.w_dim;
        for (int i = 0; i < d; ++i) {
            double acc = 0.0;
            const double* row = coeff.data() + static_cast<std::size_t>(i) * d * m;
            for (int jk = 0; jk < d * m; ++jk) acc += row[jk] * z[jk];
            out[i] += acc;
        }
    }
}

GrowthReport check_growth(const GeneratorSpec& gen, std::span<const GeneratorProbe> cloud,
                          double K) {
    require(!cloud.empty(), "check_growth: empty probe cloud");
    GrowthReport report;
    report.max_excess = -std::numeric_limits<double>::infinity();
    std::vector<double> f(static_cast<std::size_t>(gen.y_dim));
    for (const GeneratorProbe& p : cloud) {
        eval_generator(gen, p.t, p.x, p.y, p.z, f);
        const double nf = norm2(f);
        const double excess = nf - K * (1.0 + norm2(p.z));
        report.empirical_sup_f = std::max(report.empirical_sup_f, nf);
        if (excess > report.max_excess) {
            report.max_excess = excess;
            report.argmax = p;
        }
    }
    report.pass = report.max_excess <= 0.0;
    return report;
}

AffinityReport check_affine_in_z(const GeneratorSpec& gen,
                                 std::span<const GeneratorProbe> probes) {
    require(!probes.empty(), "check_affine_in_z: empty probe set");
    AffinityReport report;
    std::vector<double> f1(static_cast<std::size_t>(gen.y_dim));
    std::vector<double> f2(f1.size());
    std::vector<double> fm(f1.size());
    std::vector<double> mid(static_cast<std::size_t>(gen.z_size()));
    std::vector<double> defect(f1.size());
    bool pass = true;
    for (const GeneratorProbe& p : probes) {
        require(p.z2.size() == p.z.size(), "check_affine_in_z: probe missing z2");
        for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = 0.5 * (p.z[i] + p.z2[i]);
        eval_generator(gen, p.t, p.x, p.y, p.z, f1);
        eval_generator(gen, p.t, p.x, p.y, p.z2, f2);
        eval_generator(gen, p.t, p.x, p.y, mid, fm);
        for (std::size_t i = 0; i < defect.size(); ++i)
            defect[i] = f1[i] + f2[i] - 2.0 * fm[i];
        const double nd = norm2(defect);
        const double tol = 1e-9 * (1.0 + norm2(f1) + norm2(f2));
        if (nd > report.max_defect) {
            report.max_defect = nd;
            report.worst_tolerance = tol;
            report.argmax = p;
        }
        if (nd > tol) pass = false;
    }
    report.pass = pass;
    return report;
}

std::vector<GeneratorProbe> sample_probe_cloud(const GeneratorSpec& gen, int count,
                                               std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    std::uniform_real_distribution<double> ut(0.0, 1.0);
    std::vector<GeneratorProbe> cloud(static_cast<std::size_t>(count));
    for (GeneratorProbe& p : cloud) {
        p.t = ut(rng);
        p.x.resize(static_cast<std::size_t>(gen.x_dim));
        p.y.resize(static_cast<std::size_t>(gen.y_dim));
        p.z.resize(static_cast<std::size_t>(gen.z_size()));
        p.z2.resize(p.z.size());
        for (double& v : p.x) v = u(rng);
        for (double& v : p.y) v = u(rng);
        for (double& v : p.z) v = u(rng);
        for (double& v : p.z2) v = u(rng);
    }
    return cloud;
}

namespace {

void trivial_forward(const TimeGrid&, std::span<const double>, std::span<double>) {}

// state = W_t, one coordinate per Brownian dimension
ProblemSpec scalar_problem_base(std::string name, std::string description) {
    ProblemSpec p;
    p.name = std::move(name);
    p.description = std::move(description);
    p.generator.y_dim = 1;
    p.generator.w_dim = 1;
    p.generator.x_dim = 0;
    p.state_dim = 1;
    p.forward = trivial_forward;
    p.state_features = [](const TimeGrid& grid, int k, std::span<const double> w_path,
                          std::span<const double>, std::span<double> state) {
        (void)grid;
        state[0] = w_path[static_cast<std::size_t>(k)];
    };
    return p;
}

std::vector<ProblemSpec> make_catalogue() {
    std::vector<ProblemSpec> out;

    { // P1: pure martingale
        ProblemSpec p = scalar_problem_base("P1", "f = 0, xi = W_T; Y_t = W_t, Z = 1");
        p.generator.growth_K = 0.0;
        p.terminal = [](const TimeGrid& grid, std::span<const double> w_path,
                        std::span<const double>, std::span<double> xi) {
            xi[0] = w_path[static_cast<std::size_t>(grid.steps)];
        };
        out.push_back(std::move(p));
    }

    { // P2: linear drift, closed form Y_t = e^{T-t} W_t
        ProblemSpec p = scalar_problem_base("P2", "f = y, xi = W_T; Y_t = e^{T-t} W_t");
        p.generator.growth_K = 1.0; // declared; the linear drift actually
                                    // escapes any such bound in y
        p.generator.beta = [](double, std::span<const double>, std::span<const double> y,
                              std::span<double> b) { b[0] = y[0]; };
        p.terminal = [](const TimeGrid& grid, std::span<const double> w_path,
                        std::span<const double>, std::span<double> xi) {
            xi[0] = w_path[static_cast<std::size_t>(grid.steps)];
        };
        out.push_back(std::move(p));
    }

    { // P3: sqrt|y| with zero terminal value; zero is a fixed point of the
      // induction, while Y_t = (t0-t)^2/4, Z = 0 solves the equation for
      // every t0.
        ProblemSpec p = scalar_problem_base("P3", "f = sqrt|y|, xi = 0");
        p.generator.growth_K = 1.0;
        p.generator.beta = [](double, std::span<const double>, std::span<const double> y,
                              std::span<double> b) { b[0] = std::sqrt(std::fabs(y[0])); };
        p.terminal = [](const TimeGrid&, std::span<const double>, std::span<const double>,
                        std::span<double> xi) { xi[0] = 0.0; };
        out.push_back(std::move(p));
    }

    { // P4: bounded affine-in-z
        ProblemSpec p = scalar_problem_base("P4", "f = arctan(y) + c z, xi = tanh(W_T)");
        p.generator.growth_K = p4_growth_constant();
        p.generator.alpha = [](double, std::span<const double>, std::span<const double>,
                               std::span<double> a) { a[0] = kP4ZCoefficient; };
        p.generator.beta = [](double, std::span<const double>, std::span<const double> y,
                              std::span<double> b) { b[0] = std::atan(y[0]); };
        p.terminal = [](const TimeGrid& grid, std::span<const double> w_path,
                        std::span<const double>, std::span<double> xi) {
            xi[0] = std::tanh(w_path[static_cast<std::size_t>(grid.steps)]);
        };
        out.push_back(std::move(p));
    }

    { // P4b: pointwise-bounded generator, |f| <= pi/2
        ProblemSpec p = scalar_problem_base("P4b", "f = arctan(y), xi = tanh(W_T)");
        p.generator.growth_K = p4_growth_constant();
        p.generator.beta = [](double, std::span<const double>, std::span<const double> y,
                              std::span<double> b) { b[0] = std::atan(y[0]); };
        p.terminal = [](const TimeGrid& grid, std::span<const double> w_path,
                        std::span<const double>, std::span<double> xi) {
            xi[0] = std::tanh(w_path[static_cast<std::size_t>(grid.steps)]);
        };
        out.push_back(std::move(p));
    }

    { // P5: d=1, m=2 wiring test with a running-max forward state
        ProblemSpec p;
        p.name = "P5";
        p.description = "d=1, m=2 affine; X_t = running max of W^1";
        p.generator.y_dim = 1;
        p.generator.w_dim = 2;
        p.generator.x_dim = 1;
        p.generator.growth_K = M_PI / 2.0 + 0.1 + 1e-9;
        p.generator.alpha = [](double, std::span<const double>, std::span<const double>,
                               std::span<double> a) {
            a[0] = 0.3;  // z coordinate against W^1
            a[1] = -0.2; // z coordinate against W^2
        };
        p.generator.beta = [](double, std::span<const double> x, std::span<const double> y,
                              std::span<double> b) {
            b[0] = std::atan(y[0]) + 0.1 * std::tanh(x[0]);
        };
        p.forward = [](const TimeGrid& grid, std::span<const double> w_path,
                       std::span<double> x_path) {
            double running = 0.0;
            for (int k = 0; k <= grid.steps; ++k) {
                running = std::max(running, w_path[static_cast<std::size_t>(k) * 2]);
                x_path[static_cast<std::size_t>(k)] = running;
            }
        };
        p.terminal = [](const TimeGrid& grid, std::span<const double> w_path,
                        std::span<const double>, std::span<double> xi) {
            const std::size_t last = static_cast<std::size_t>(grid.steps) * 2;
            xi[0] = std::tanh(w_path[last]) + 0.5 * std::tanh(w_path[last + 1]);
        };
        p.state_dim = 3;
        p.state_features = [](const TimeGrid&, int k, std::span<const double> w_path,
                              std::span<const double> x_path, std::span<double> state) {
            state[0] = w_path[static_cast<std::size_t>(k) * 2];
            state[1] = w_path[static_cast<std::size_t>(k) * 2 + 1];
            state[2] = x_path[static_cast<std::size_t>(k)];
        };
        out.push_back(std::move(p));
    }

    return out;
}

} // namespace

const std::vector<ProblemSpec>& builtin_problems() {
    static const std::vector<ProblemSpec> catalogue = make_catalogue();
    return catalogue;
}

const ProblemSpec& find_problem(const std::string& name) {
    for (const ProblemSpec& p : builtin_problems())
        if (p.name == name) return p;
    throw ConfigError("unknown problem \"" + name + "\" (see `problems list`)");
}

} // namespace bsde
