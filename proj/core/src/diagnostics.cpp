#include "bsde/diagnostics.hpp"

#include "bsde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

namespace bsde {

namespace {

void require(bool cond, const char* what) {
    if (!cond) throw ContractError(what);
}

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

std::string format_time(double t) {
    std::ostringstream os;
    os << std::setprecision(10) << t;
    return os.str();
}

double norm_at(std::span<const double> a, std::size_t offset, int d) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += a[offset + j] * a[offset + j];
    return std::sqrt(s);
}

} // namespace

const char* verdict_name(Verdict v) {
    switch (v) {
        case Verdict::pass: return "pass";
        case Verdict::fail: return "fail";
        case Verdict::info: return "info";
    }
    return "info";
}

void DiagnosticsReport::extend(const DiagnosticsReport& other) {
    entries.insert(entries.end(), other.entries.begin(), other.entries.end());
}

bool DiagnosticsReport::all_passed() const {
    return std::none_of(entries.begin(), entries.end(),
                        [](const DiagnosticEntry& e) { return e.verdict == Verdict::fail; });
}

void write_csv(const DiagnosticsReport& report, std::ostream& os) {
    os << "statistic_id,D,t,estimate,std_error,threshold,verdict\n";
    os << std::setprecision(17);
    for (const DiagnosticEntry& e : report.entries) {
        os << e.id << ',' << e.delay_steps << ',' << e.time_label << ',' << e.estimate << ','
           << e.std_error << ',';
        if (e.threshold) os << *e.threshold;
        os << ',' << verdict_name(e.verdict) << '\n';
    }
}

void write_text(const DiagnosticsReport& report, std::ostream& os) {
    os << std::setprecision(17);
    for (const DiagnosticEntry& e : report.entries) {
        os << "statistic { id=" << e.id << " D=" << e.delay_steps << " t=" << e.time_label
           << " estimate=" << e.estimate << " std_error=" << e.std_error;
        if (e.threshold) os << " threshold=" << *e.threshold;
        os << " verdict=" << verdict_name(e.verdict) << " n=" << e.sample_size
           << " seed=" << e.seed << " }\n";
    }
}

double sample_mean(std::span<const double> xs) {
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

void sample_mean_se(std::span<const double> xs, double& mean, double& se) {
    const std::size_t n = xs.size();
    mean = sample_mean(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    se = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0;
}

// --- second-moment statistics ------------------------------------------

namespace {

struct L2Stats {
    double sup_y2_mean, sup_y2_se;
    double int_z2_mean, int_z2_se;
    double int_zt2_mean, int_zt2_se;
    double sup_tail_v2_mean, sup_tail_v2_se;
};

L2Stats compute_l2(const SchemeOutput& out) {
    const int P = out.paths;
    const int N = out.grid.steps;
    const int d = out.y_dim;
    const int m = out.w_dim;
    const double dt = out.grid.dt();

    std::vector<double> sup_y2(static_cast<std::size_t>(P));
    std::vector<double> int_z2(static_cast<std::size_t>(P));
    std::vector<double> int_zt2(static_cast<std::size_t>(P));
    std::vector<double> sup_tv2(static_cast<std::size_t>(P));

    for (int p = 0; p < P; ++p) {
        double sy = 0.0, iz = 0.0, izt = 0.0, stv = 0.0;
        for (int k = 0; k <= N; ++k) {
            double y2 = 0.0, tv2 = 0.0;
            for (int j = 0; j < d; ++j) {
                const double y = out.y(p, k, j);
                y2 += y * y;
                const double tv = out.v(p, N, j) - out.v(p, k, j);
                tv2 += tv * tv;
            }
            sy = std::max(sy, y2);
            stv = std::max(stv, tv2);
        }
        for (int k = 0; k < N; ++k) {
            double z2 = 0.0, zt2 = 0.0;
            for (int j = 0; j < d; ++j)
                for (int l = 0; l < m; ++l) {
                    z2 += out.z(p, k, j, l) * out.z(p, k, j, l);
                    zt2 += out.ztilde(p, k, j, l) * out.ztilde(p, k, j, l);
                }
            iz += z2 * dt;
            izt += zt2 * dt;
        }
        sup_y2[static_cast<std::size_t>(p)] = sy;
        int_z2[static_cast<std::size_t>(p)] = iz;
        int_zt2[static_cast<std::size_t>(p)] = izt;
        sup_tv2[static_cast<std::size_t>(p)] = stv;
    }

    L2Stats s{};
    sample_mean_se(sup_y2, s.sup_y2_mean, s.sup_y2_se);
    sample_mean_se(int_z2, s.int_z2_mean, s.int_z2_se);
    sample_mean_se(int_zt2, s.int_zt2_mean, s.int_zt2_se);
    sample_mean_se(sup_tv2, s.sup_tail_v2_mean, s.sup_tail_v2_se);
    return s;
}

const char* kL2Ids[4] = {"l2_sup_Y2", "l2_int_Z2", "l2_int_Ztilde2", "l2_sup_tail_V2"};

} // namespace

DiagnosticsReport l2_bounds(const SchemeOutput& output) {
    const L2Stats s = compute_l2(output);
    const double est[4] = {s.sup_y2_mean, s.int_z2_mean, s.int_zt2_mean, s.sup_tail_v2_mean};
    const double se[4] = {s.sup_y2_se, s.int_z2_se, s.int_zt2_se, s.sup_tail_v2_se};
    DiagnosticsReport report;
    for (int i = 0; i < 4; ++i) {
        DiagnosticEntry e;
        e.id = kL2Ids[i];
        e.delay_steps = output.delay_steps;
        e.estimate = est[i];
        e.std_error = se[i];
        e.verdict = Verdict::info;
        e.sample_size = output.paths;
        e.seed = output.seed;
        report.add(std::move(e));
    }
    return report;
}

DiagnosticsReport l2_bounds_sweep(std::span<const SchemeOutput> outputs) {
    require(outputs.size() >= 2, "l2_bounds_sweep: need at least two outputs");
    DiagnosticsReport report;
    std::vector<std::vector<double>> series(4);
    for (const SchemeOutput& out : outputs) {
        const DiagnosticsReport one = l2_bounds(out);
        for (int i = 0; i < 4; ++i) series[static_cast<std::size_t>(i)].push_back(one.entries[static_cast<std::size_t>(i)].estimate);
        report.extend(one);
    }
    for (int i = 0; i < 4; ++i) {
        const double med = median(series[static_cast<std::size_t>(i)]);
        const double worst = *std::max_element(series[static_cast<std::size_t>(i)].begin(),
                                               series[static_cast<std::size_t>(i)].end());
        DiagnosticEntry e;
        e.id = std::string(kL2Ids[i]) + "_bounded";
        e.delay_steps = 0;
        e.estimate = med > 0.0 ? worst / med : (worst > 0.0 ? std::numeric_limits<double>::infinity() : 1.0);
        e.threshold = 2.0;
        e.verdict = e.estimate <= 2.0 ? Verdict::pass : Verdict::fail;
        e.sample_size = static_cast<long>(outputs.size());
        e.seed = outputs.front().seed;
        report.add(std::move(e));
    }
    return report;
}

DiagnosticsReport z_energy_inequality(const SchemeOutput& output, double K, double lambda2) {
    if (!(lambda2 > 2.0 * K))
        throw ConfigError("z_energy_inequality: requires lambda^2 > 2K (got lambda^2 = " +
                          std::to_string(lambda2) + ", K = " + std::to_string(K) + ")");
    const int P = output.paths;
    const int N = output.grid.steps;
    const int d = output.y_dim;
    const int m = output.w_dim;
    const double dt = output.grid.dt();
    const double T = output.grid.horizon;

    const double denom = 1.0 - 2.0 * K / lambda2;
    const double c_a = 4.0 * K * lambda2 / denom;

    // per-path suffix integrals of ||Z||^2 and ||Y+U||^2
    TimeGrid grid_for_blocks = output.grid;
    grid_for_blocks.delay_steps = output.delay_steps;
    const std::vector<int> boundaries = grid_for_blocks.block_boundaries();

    DiagnosticsReport report;
    std::vector<double> margin(static_cast<std::size_t>(P));
    for (int b : boundaries) {
        for (int p = 0; p < P; ++p) {
            double z2 = 0.0, yt2 = 0.0, xi2 = 0.0;
            for (int k = b; k < N; ++k) {
                for (int j = 0; j < d; ++j) {
                    for (int l = 0; l < m; ++l) z2 += output.z(p, k, j, l) * output.z(p, k, j, l);
                    const double yt = output.y(p, k, j) + output.u(p, k, j);
                    yt2 += yt * yt;
                }
            }
            for (int j = 0; j < d; ++j) xi2 += output.y(p, N, j) * output.y(p, N, j);
            // both sides from the same path: the xi contribution of C_B is
            // kept pathwise so the margin carries the right sampling error
            const double c_b_pathwise = (xi2 + 2.0 * K * T / lambda2) / denom;
            margin[static_cast<std::size_t>(p)] = c_a * yt2 * dt + c_b_pathwise - z2 * dt;
        }
        double mean = 0.0, se = 0.0;
        sample_mean_se(margin, mean, se);
        DiagnosticEntry e;
        e.id = "z_energy_margin";
        e.delay_steps = output.delay_steps;
        e.time_label = format_time(output.grid.node(b));
        e.estimate = mean;
        e.std_error = se;
        e.threshold = 0.0;
        e.verdict = mean + 2.0 * se >= 0.0 ? Verdict::pass : Verdict::fail;
        e.sample_size = P;
        e.seed = output.seed;
        report.add(std::move(e));
    }
    return report;
}

// --- delay decay ----------------------------------------------------------

UDecayStudy u_decay_from_outputs(std::span<const SchemeOutput> outputs, double q) {
    if (q < 1.0 || q >= 2.0) throw ConfigError("u_decay: q must lie in [1, 2)");
    if (outputs.size() < 3) throw ConfigError("u_decay: need at least 3 delay values");

    UDecayStudy study;
    study.q = q;
    study.reference_rate = (2.0 - q) / 4.0; // exponent of h at q' = (q+2)/2

    for (const SchemeOutput& out : outputs) {
        const int P = out.paths;
        const int N = out.grid.steps;
        const int d = out.y_dim;
        std::vector<double> per_path(static_cast<std::size_t>(P));
        for (int p = 0; p < P; ++p) {
            double sup = 0.0;
            for (int k = 0; k <= N; ++k)
                sup = std::max(sup, norm_at(out.U, out.node_index(p, k, 0), d));
            per_path[static_cast<std::size_t>(p)] = std::pow(sup, q);
        }
        UDecayRow row;
        row.delay_steps = out.delay_steps;
        row.h = out.delay_steps * out.grid.dt();
        sample_mean_se(per_path, row.estimate, row.std_error);
        study.rows.push_back(row);
    }
    std::sort(study.rows.begin(), study.rows.end(),
              [](const UDecayRow& a, const UDecayRow& b) { return a.h < b.h; });

    study.strictly_decreasing = true;
    for (std::size_t i = 1; i < study.rows.size(); ++i)
        if (!(study.rows[i].estimate > study.rows[i - 1].estimate))
            study.strictly_decreasing = false;

    bool all_zero = true;
    for (const UDecayRow& r : study.rows)
        if (r.estimate > 1e-300) all_zero = false;
    if (all_zero) {
        study.degenerate_zero = true;
        study.verdict = Verdict::info;
        return study;
    }

    // weighted log-log fit; weights from the delta method on log(estimate)
    double sw = 0.0, swx = 0.0, swy = 0.0;
    std::vector<double> xs, ys, ws;
    for (const UDecayRow& r : study.rows) {
        if (r.estimate <= 0.0) continue;
        const double x = std::log(r.h);
        const double y = std::log(r.estimate);
        const double sigma = r.std_error > 0.0 ? r.std_error / r.estimate : 1e-6;
        const double w = 1.0 / (sigma * sigma);
        xs.push_back(x);
        ys.push_back(y);
        ws.push_back(w);
        sw += w;
        swx += w * x;
        swy += w * y;
    }
    if (xs.size() < 2) { // a slope needs at least two usable rows
        study.slope_se = std::numeric_limits<double>::infinity();
        study.verdict = Verdict::info;
        return study;
    }
    const double xbar = swx / sw;
    const double ybar = swy / sw;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += ws[i] * (xs[i] - xbar) * (xs[i] - xbar);
        sxy += ws[i] * (xs[i] - xbar) * (ys[i] - ybar);
    }
    study.slope = sxy / sxx;
    study.slope_se = std::sqrt(1.0 / sxx);
    study.verdict = study.slope > 1.645 * study.slope_se ? Verdict::pass : Verdict::fail;
    return study;
}

UDecayStudy u_decay_study(const ProblemSpec& problem, const PathEnsemble& ensemble,
                          std::span<const int> delay_list, double q,
                          const EngineConfig& engine) {
    if (delay_list.size() < 3) throw ConfigError("u_decay: need at least 3 delay values");
    std::vector<SchemeOutput> outputs;
    outputs.reserve(delay_list.size());
    for (int D : delay_list) outputs.push_back(run_scheme(problem, ensemble, D, engine));
    return u_decay_from_outputs(outputs, q);
}

// --- conditional variation and Condition UT -------------------------------

CondVarEstimate conditional_variation(std::span<const double> values, int d,
                                      const TimeGrid& grid, std::span<const int> partition,
                                      CondExpEngine& engine) {
    const int N = grid.steps;
    const int P = engine.paths();
    require(static_cast<int>(values.size()) == P * grid.nodes() * d,
            "conditional_variation: value array size mismatch");
    std::vector<int> nodes(partition.begin(), partition.end());
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
    if (nodes.empty() || nodes.back() != N)
        throw ContractError("conditional_variation: partition must include the terminal node");
    for (int n : nodes)
        require(n >= 0 && n <= N, "conditional_variation: partition node out of range");

    CondVarEstimate cv;
    cv.per_path.assign(static_cast<std::size_t>(P), 0.0);
    auto at = [&](int p, int k, int j) {
        return values[(static_cast<std::size_t>(p) * grid.nodes() + k) * d + j];
    };

    for (int p = 0; p < P; ++p) {
        double n2 = 0.0;
        for (int j = 0; j < d; ++j) n2 += at(p, N, j) * at(p, N, j);
        cv.per_path[static_cast<std::size_t>(p)] = std::sqrt(n2);
    }

    std::vector<double> delta(static_cast<std::size_t>(P) * d);
    for (std::size_t i = 0; i + 1 < nodes.size(); ++i) {
        const int a = nodes[i];
        const int b = nodes[i + 1];
        for (int p = 0; p < P; ++p)
            for (int j = 0; j < d; ++j)
                delta[static_cast<std::size_t>(p) * d + j] = at(p, b, j) - at(p, a, j);
        const std::vector<double> fitted = engine.project(a, delta, d);
        for (int p = 0; p < P; ++p)
            cv.per_path[static_cast<std::size_t>(p)] +=
                norm_at(fitted, static_cast<std::size_t>(p) * d, d);
    }
    sample_mean_se(cv.per_path, cv.estimate, cv.std_error);
    return cv;
}

CvBound cv_quasimartingale_bound(const SchemeOutput& output, double K) {
    const int P = output.paths;
    const int N = output.grid.steps;
    const int d = output.y_dim;
    const int m = output.w_dim;
    const double dt = output.grid.dt();
    const double T = output.grid.horizon;

    std::vector<double> xi_norm(static_cast<std::size_t>(P));
    std::vector<double> zt2(static_cast<std::size_t>(P));
    for (int p = 0; p < P; ++p) {
        xi_norm[static_cast<std::size_t>(p)] = norm_at(output.Y, output.node_index(p, N, 0), d);
        double acc = 0.0;
        for (int k = 0; k < N; ++k)
            for (int j = 0; j < d; ++j)
                for (int l = 0; l < m; ++l)
                    acc += output.ztilde(p, k, j, l) * output.ztilde(p, k, j, l);
        zt2[static_cast<std::size_t>(p)] = acc * dt;
    }
    double xi_mean = 0.0, xi_se = 0.0, m2_mean = 0.0, m2_se = 0.0;
    sample_mean_se(xi_norm, xi_mean, xi_se);
    sample_mean_se(zt2, m2_mean, m2_se);

    CvBound bound;
    bound.value = xi_mean + K * (T + std::sqrt(T) * std::sqrt(m2_mean));
    const double droot = m2_mean > 0.0 ? K * std::sqrt(T) / (2.0 * std::sqrt(m2_mean)) : 0.0;
    bound.std_error = std::sqrt(xi_se * xi_se + droot * droot * m2_se * m2_se);
    return bound;
}

UtStatistics ut_statistic(std::span<const double> values, int d, const TimeGrid& grid,
                          CondExpEngine& engine, int random_controls, std::uint64_t seed) {
    const int N = grid.steps;
    const int P = engine.paths();
    require(static_cast<int>(values.size()) == P * grid.nodes() * d,
            "ut_statistic: value array size mismatch");
    auto at = [&](int p, int k, int j) {
        return values[(static_cast<std::size_t>(p) * grid.nodes() + k) * d + j];
    };

    std::vector<double> adversarial(static_cast<std::size_t>(P), 0.0);
    std::vector<double> delta(static_cast<std::size_t>(P) * d);
    for (int k = 0; k < N; ++k) {
        for (int p = 0; p < P; ++p)
            for (int j = 0; j < d; ++j)
                delta[static_cast<std::size_t>(p) * d + j] = at(p, k + 1, j) - at(p, k, j);
        const std::vector<double> drift = engine.project(k, delta, d);
        for (int p = 0; p < P; ++p)
            for (int j = 0; j < d; ++j) {
                const double g = drift[static_cast<std::size_t>(p) * d + j];
                const double h = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
                adversarial[static_cast<std::size_t>(p)] +=
                    h * delta[static_cast<std::size_t>(p) * d + j];
            }
    }

    UtStatistics ut;
    sample_mean_se(adversarial, ut.adversarial_mean, ut.adversarial_se);

    // deterministic +-1 step controls, one sign stream per control
    std::vector<double> magnitudes;
    magnitudes.reserve(static_cast<std::size_t>(random_controls) * P);
    for (int r = 0; r < random_controls; ++r) {
        std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (r + 1)));
        std::vector<double> signs(static_cast<std::size_t>(N));
        for (int k = 0; k < N; ++k) signs[static_cast<std::size_t>(k)] = (rng() & 1) ? 1.0 : -1.0;
        for (int p = 0; p < P; ++p) {
            double acc2 = 0.0;
            for (int j = 0; j < d; ++j) {
                double acc = 0.0;
                for (int k = 0; k < N; ++k)
                    acc += signs[static_cast<std::size_t>(k)] * (at(p, k + 1, j) - at(p, k, j));
                acc2 += acc * acc;
            }
            magnitudes.push_back(std::sqrt(acc2));
        }
    }
    if (!magnitudes.empty()) {
        std::sort(magnitudes.begin(), magnitudes.end());
        const std::size_t n = magnitudes.size();
        ut.quantile50 = magnitudes[static_cast<std::size_t>(0.50 * (n - 1))];
        ut.quantile99 = magnitudes[static_cast<std::size_t>(0.99 * (n - 1))];
    }
    return ut;
}

AldousStatistics aldous_statistics(std::span<const double> values, int d,
                                   const TimeGrid& grid, std::span<const double> radii,
                                   std::span<const double> deltas) {
    const int N = grid.steps;
    const int P = static_cast<int>(values.size()) / (grid.nodes() * d);
    require(static_cast<int>(values.size()) == P * grid.nodes() * d,
            "aldous_statistics: value array size mismatch");
    auto at = [&](int p, int k, int j) {
        return values[(static_cast<std::size_t>(p) * grid.nodes() + k) * d + j];
    };

    AldousStatistics out;

    std::vector<double> sups(static_cast<std::size_t>(P), 0.0);
    for (int p = 0; p < P; ++p) {
        double sup = 0.0;
        for (int k = 0; k <= N; ++k)
            sup = std::max(sup, norm_at(values, (static_cast<std::size_t>(p) * grid.nodes() + k) * d, d));
        sups[static_cast<std::size_t>(p)] = sup;
    }
    std::vector<double> rgrid(radii.begin(), radii.end());
    if (rgrid.empty()) {
        std::vector<double> sorted(sups);
        std::sort(sorted.begin(), sorted.end());
        for (double qq : {0.5, 0.75, 0.9, 0.95, 0.99})
            rgrid.push_back(sorted[static_cast<std::size_t>(qq * (P - 1))]);
    }
    for (double r : rgrid) {
        AldousTailRow row;
        row.radius = r;
        long count = 0;
        for (double s : sups)
            if (s >= r) ++count;
        row.tail_probability = static_cast<double>(count) / static_cast<double>(P);
        out.tail.push_back(row);
    }

    if (deltas.empty()) return out;
    const double max_delta = *std::max_element(deltas.begin(), deltas.end());
    const double dt = grid.dt();
    const int max_gap = std::min(N, static_cast<int>(std::floor(max_delta / dt + 1e-9)));

    // per-pair mean and variance of ||F_b - F_a||, gaps up to max_delta
    struct PairStat {
        int a, b;
        double mean, se;
    };
    std::vector<PairStat> pairs;
    for (int gap = 1; gap <= max_gap; ++gap) {
        for (int a = 0; a + gap <= N; ++a) {
            const int b = a + gap;
            double s1 = 0.0, s2 = 0.0;
            for (int p = 0; p < P; ++p) {
                double n2 = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double diff = at(p, b, j) - at(p, a, j);
                    n2 += diff * diff;
                }
                const double n = std::sqrt(n2);
                s1 += n;
                s2 += n * n;
            }
            const double mean = s1 / P;
            const double var = P > 1 ? std::max(0.0, (s2 - P * mean * mean) / (P - 1)) : 0.0;
            pairs.push_back({a, b, mean, std::sqrt(var / P)});
        }
    }

    for (double delta : deltas) {
        AldousIncrementRow row;
        row.delta = delta;
        for (const PairStat& ps : pairs) {
            if ((ps.b - ps.a) * dt > delta + 1e-12) continue;
            if (ps.mean > row.value) {
                row.value = ps.mean;
                row.std_error = ps.se;
                row.node_a = ps.a;
                row.node_b = ps.b;
            }
        }
        out.bcurve.push_back(row);
    }
    return out;
}

// --- martingale and orthogonality residuals -------------------------------

namespace {

struct TestFn {
    std::string name;
    std::vector<std::pair<int, int>> factors; // (node, coord) of tanh factors; empty = constant 1
};

std::vector<TestFn> test_family(int anchor, int history_dim) {
    std::vector<TestFn> fns;
    fns.push_back({"1", {}});
    if (anchor < 1) return fns; // node-0 history is degenerate, constants only
    for (int c = 0; c < history_dim; ++c)
        fns.push_back({"tanh[s" + std::to_string(c) + "]", {{anchor, c}}});
    const int half = std::max(1, anchor / 2);
    const int quarter = std::max(1, anchor / 4);
    if (half != anchor)
        fns.push_back({"tanh2", {{anchor, 0}, {half, 0}}});
    if (quarter != half && quarter != anchor)
        fns.push_back({"tanh3", {{anchor, 0}, {half, 0}, {quarter, 0}}});
    return fns;
}

} // namespace

std::vector<std::pair<int, int>> default_node_pairs(const TimeGrid& grid) {
    const int N = grid.steps;
    std::set<std::pair<int, int>> pairs;
    for (int a : {0, N / 8, N / 4, N / 2, 3 * N / 4})
        for (int s : {std::max(1, N / 8), std::max(1, N / 4), std::max(1, N / 2)}) {
            const int b = a + s;
            if (b <= N && a < b) pairs.emplace(a, b);
        }
    return {pairs.begin(), pairs.end()};
}

MartingaleResidualTable martingale_residuals(std::span<const double> process, int d,
                                             std::span<const double> history, int history_dim,
                                             const TimeGrid& grid,
                                             std::span<const std::pair<int, int>> node_pairs) {
    const int nodes = grid.nodes();
    const int P = static_cast<int>(process.size()) / (nodes * d);
    require(static_cast<int>(process.size()) == P * nodes * d,
            "martingale_residuals: process size mismatch");
    require(static_cast<int>(history.size()) == P * nodes * history_dim,
            "martingale_residuals: history size mismatch");

    auto proc = [&](int p, int k, int j) {
        return process[(static_cast<std::size_t>(p) * nodes + k) * d + j];
    };
    auto hist = [&](int p, int k, int c) {
        return history[(static_cast<std::size_t>(p) * nodes + k) * history_dim + c];
    };

    MartingaleResidualTable table;
    std::vector<double> hval(static_cast<std::size_t>(P));
    for (const auto& [a, b] : node_pairs) {
        require(a >= 0 && b <= grid.steps && a < b, "martingale_residuals: bad node pair");
        for (const TestFn& fn : test_family(a, history_dim)) {
            for (int p = 0; p < P; ++p) {
                double h = 1.0;
                for (const auto& [node, coord] : fn.factors) h *= std::tanh(hist(p, node, coord));
                hval[static_cast<std::size_t>(p)] = h;
            }
            for (int j = 0; j < d; ++j) {
                double s1 = 0.0, s2 = 0.0;
                for (int p = 0; p < P; ++p) {
                    const double x = (proc(p, b, j) - proc(p, a, j)) * hval[static_cast<std::size_t>(p)];
                    s1 += x;
                    s2 += x * x;
                }
                MartingaleResidualCell cell;
                cell.node_a = a;
                cell.node_b = b;
                cell.test_fn = fn.name;
                cell.coord = j;
                cell.mean = s1 / P;
                const double var =
                    P > 1 ? std::max(0.0, (s2 - P * cell.mean * cell.mean) / (P - 1)) : 0.0;
                cell.std_error = std::sqrt(var / P);
                const double floor = 1e-12 * (1.0 + std::sqrt(s2 / P));
                cell.pass = std::fabs(cell.mean) <= std::max(3.0 * cell.std_error, floor);
                cell.z = cell.std_error > 0.0 ? cell.mean / cell.std_error
                                              : (cell.pass ? 0.0 : std::numeric_limits<double>::infinity());
                table.cells.push_back(std::move(cell));
            }
        }
    }
    long passed = 0;
    for (const MartingaleResidualCell& c : table.cells)
        if (c.pass) ++passed;
    table.pass_fraction =
        table.cells.empty() ? 1.0 : static_cast<double>(passed) / static_cast<double>(table.cells.size());
    table.verdict = table.pass_fraction >= 0.95 ? Verdict::pass : Verdict::fail;
    return table;
}

WeakLimitDecomposition decompose_L(std::span<const double> V, std::span<const double> Z,
                                   std::span<const double> increments, int paths, int steps,
                                   int d, int m) {
    const int nodes = steps + 1;
    require(static_cast<int>(V.size()) == paths * nodes * d, "decompose_L: V size mismatch");
    require(static_cast<int>(Z.size()) == paths * steps * d * m, "decompose_L: Z size mismatch");
    require(static_cast<int>(increments.size()) == paths * steps * m,
            "decompose_L: increment size mismatch");

    WeakLimitDecomposition out;
    out.y_dim = d;
    out.w_dim = m;
    out.paths = paths;
    out.steps = steps;
    out.L.assign(static_cast<std::size_t>(paths) * nodes * d, 0.0);
    out.MZ.assign(out.L.size(), 0.0);

    for (int p = 0; p < paths; ++p) {
        for (int k = 0; k < steps; ++k) {
            for (int j = 0; j < d; ++j) {
                double zdw = 0.0;
                for (int l = 0; l < m; ++l)
                    zdw += Z[((static_cast<std::size_t>(p) * steps + k) * d + j) * m + l] *
                           increments[(static_cast<std::size_t>(p) * steps + k) * m + l];
                const std::size_t cur = (static_cast<std::size_t>(p) * nodes + k) * d + j;
                const std::size_t nxt = (static_cast<std::size_t>(p) * nodes + k + 1) * d + j;
                out.MZ[nxt] = out.MZ[cur] + zdw;
                const double v0 = V[(static_cast<std::size_t>(p) * nodes) * d + j];
                out.L[nxt] = V[nxt] - v0 - out.MZ[nxt];
            }
        }
    }
    return out;
}

std::vector<double> coordinate_product(std::span<const double> a, int a_dim, int i,
                                       std::span<const double> b, int b_dim, int j, int paths,
                                       int nodes) {
    require(static_cast<int>(a.size()) == paths * nodes * a_dim,
            "coordinate_product: first array size mismatch");
    require(static_cast<int>(b.size()) == paths * nodes * b_dim,
            "coordinate_product: second array size mismatch");
    std::vector<double> out(static_cast<std::size_t>(paths) * nodes);
    for (int p = 0; p < paths; ++p)
        for (int k = 0; k < nodes; ++k)
            out[static_cast<std::size_t>(p) * nodes + k] =
                a[(static_cast<std::size_t>(p) * nodes + k) * a_dim + i] *
                b[(static_cast<std::size_t>(p) * nodes + k) * b_dim + j];
    return out;
}

// --- stabilization of per-time laws ----------------------------------------

double ks_distance(std::span<const double> a, std::span<const double> b) {
    std::vector<double> xs(a.begin(), a.end());
    std::vector<double> ys(b.begin(), b.end());
    std::sort(xs.begin(), xs.end());
    std::sort(ys.begin(), ys.end());
    const double na = static_cast<double>(xs.size());
    const double nb = static_cast<double>(ys.size());
    std::size_t i = 0, j = 0;
    double sup = 0.0;
    while (i < xs.size() && j < ys.size()) {
        // advance past ties on both sides before comparing the CDFs
        const double v = std::min(xs[i], ys[j]);
        while (i < xs.size() && xs[i] == v) ++i;
        while (j < ys.size() && ys[j] == v) ++j;
        sup = std::max(sup, std::fabs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    return sup;
}

std::vector<LawDistanceRow> law_stabilization(std::span<const SchemeOutput> outputs,
                                              std::span<const int> nodes) {
    if (outputs.size() < 2)
        throw ConfigError("law_stabilization: need at least two outputs");
    const SchemeOutput& first = outputs.front();
    for (const SchemeOutput& out : outputs) {
        if (out.grid.steps != first.grid.steps || out.grid.horizon != first.grid.horizon ||
            out.paths != first.paths || out.y_dim != first.y_dim)
            throw ContractError("law_stabilization: outputs live on different grids");
    }

    std::vector<LawDistanceRow> rows;
    std::vector<double> sa(static_cast<std::size_t>(first.paths));
    std::vector<double> sb(sa.size());
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        for (std::size_t j = i + 1; j < outputs.size(); ++j) {
            for (int node : nodes) {
                require(node >= 0 && node <= first.grid.steps,
                        "law_stabilization: node out of range");
                for (const char* component : {"Y", "V"}) {
                    const bool is_y = component[0] == 'Y';
                    for (int c = 0; c < first.y_dim; ++c) {
                        for (int p = 0; p < first.paths; ++p) {
                            sa[static_cast<std::size_t>(p)] =
                                is_y ? outputs[i].y(p, node, c) : outputs[i].v(p, node, c);
                            sb[static_cast<std::size_t>(p)] =
                                is_y ? outputs[j].y(p, node, c) : outputs[j].v(p, node, c);
                        }
                        LawDistanceRow row;
                        row.delay_a = outputs[i].delay_steps;
                        row.delay_b = outputs[j].delay_steps;
                        row.node = node;
                        row.component = component;
                        row.coord = c;
                        row.ks_distance = ks_distance(sa, sb);
                        rows.push_back(std::move(row));
                    }
                }
            }
        }
    }
    return rows;
}

} // namespace bsde
