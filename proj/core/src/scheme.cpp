#include "bsde/scheme.hpp"

#include "bsde/errors.hpp"
#include "parallel.hpp"

#include <atomic>
#include <cmath>
#include <numeric>

namespace bsde {

namespace {

void require(bool cond, const char* what) {
    if (!cond) throw ContractError(what);
}

void mean_and_se(std::span<const double> samples, double& mean, double& se) {
    const std::size_t n = samples.size();
    mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double s : samples) ss += (s - mean) * (s - mean);
    const double var = n > 1 ? ss / static_cast<double>(n - 1) : 0.0;
    se = std::sqrt(var / static_cast<double>(n));
}

} // namespace

std::vector<double> build_forward_states(const ProblemSpec& problem,
                                         const PathEnsemble& ensemble) {
    const int xd = problem.generator.x_dim;
    if (xd == 0) return {};
    const int nodes = ensemble.grid.nodes();
    std::vector<double> x(static_cast<std::size_t>(ensemble.paths) * nodes * xd, 0.0);
    for (int p = 0; p < ensemble.paths; ++p) {
        std::span<double> x_path{x.data() + static_cast<std::size_t>(p) * nodes * xd,
                                 static_cast<std::size_t>(nodes) * xd};
        problem.forward(ensemble.grid, ensemble.path_values(p), x_path);
    }
    return x;
}

std::vector<std::vector<double>> build_state_table(const ProblemSpec& problem,
                                                   const PathEnsemble& ensemble) {
    const int S = problem.state_dim;
    const int xd = problem.generator.x_dim;
    const int nodes = ensemble.grid.nodes();
    const std::vector<double> x = build_forward_states(problem, ensemble);

    std::vector<std::vector<double>> table(static_cast<std::size_t>(nodes));
    for (int k = 0; k < nodes; ++k)
        table[static_cast<std::size_t>(k)].assign(
            static_cast<std::size_t>(ensemble.paths) * S, 0.0);

    detail::parallel_for_ranges(ensemble.paths, [&](int lo, int hi) {
        for (int p = lo; p < hi; ++p) {
            std::span<const double> w_path = ensemble.path_values(p);
            std::span<const double> x_path =
                xd > 0
                    ? std::span<const double>{x.data() + static_cast<std::size_t>(p) * nodes * xd,
                                              static_cast<std::size_t>(nodes) * xd}
                    : std::span<const double>{};
            for (int k = 0; k < nodes; ++k) {
                std::span<double> s{table[static_cast<std::size_t>(k)].data() +
                                        static_cast<std::size_t>(p) * S,
                                    static_cast<std::size_t>(S)};
                problem.state_features(ensemble.grid, k, w_path, x_path, s);
            }
        }
    });
    return table;
}

std::vector<double> evaluate_terminal(const ProblemSpec& problem, const PathEnsemble& ensemble,
                                      std::span<const double> forward_states) {
    const int d = problem.generator.y_dim;
    const int xd = problem.generator.x_dim;
    const int nodes = ensemble.grid.nodes();
    std::vector<double> xi(static_cast<std::size_t>(ensemble.paths) * d, 0.0);
    for (int p = 0; p < ensemble.paths; ++p) {
        std::span<const double> x_path =
            xd > 0 ? std::span<const double>{forward_states.data() +
                                                 static_cast<std::size_t>(p) * nodes * xd,
                                             static_cast<std::size_t>(nodes) * xd}
                   : std::span<const double>{};
        problem.terminal(ensemble.grid, ensemble.path_values(p), x_path,
                         {xi.data() + static_cast<std::size_t>(p) * d,
                          static_cast<std::size_t>(d)});
    }
    for (double v : xi)
        if (!std::isfinite(v)) throw NumericalError("terminal value is not finite");
    return xi;
}

std::unique_ptr<CondExpEngine> make_engine(const ProblemSpec& problem,
                                           const PathEnsemble& ensemble,
                                           const EngineConfig& config) {
    if (config.kind == EngineConfig::Kind::tree_exact) {
        if (!ensemble.tree_enumeration || ensemble.dims != 1)
            throw ConfigError(
                "tree-exact engine requires an enumerated tree ensemble (m = 1)");
        return std::make_unique<TreeExactEngine>(
            build_tree(ensemble.grid.steps, ensemble.grid.horizon));
    }
    return std::make_unique<RegressionEngine>(build_state_table(problem, ensemble),
                                              problem.state_dim,
                                              make_basis(config.basis, config.ridge));
}

SchemeOutput run_scheme(const ProblemSpec& problem, const PathEnsemble& ensemble,
                        int delay_steps, const EngineConfig& config) {
    const TimeGrid& grid = ensemble.grid;
    const int N = grid.steps;
    const int P = ensemble.paths;
    const int d = problem.generator.y_dim;
    const int m = problem.generator.w_dim;
    const int D = delay_steps;
    const double dt = grid.dt();

    if (m != ensemble.dims)
        throw ContractError("run_scheme: problem Brownian dimension " + std::to_string(m) +
                            " does not match ensemble dims " + std::to_string(ensemble.dims));
    if (D < 1 || D > N)
        throw ConfigError("run_scheme: delay_steps must lie in [1, N]");

    const std::vector<double> x = build_forward_states(problem, ensemble);
    const std::vector<double> xi = evaluate_terminal(problem, ensemble, x);
    std::unique_ptr<CondExpEngine> engine = make_engine(problem, ensemble, config);

    SchemeOutput out;
    out.grid = grid;
    out.delay_steps = D;
    out.y_dim = d;
    out.w_dim = m;
    out.paths = P;
    out.problem = problem.name;
    out.engine = engine->describe();
    out.seed = ensemble.seed;
    out.Y.assign(static_cast<std::size_t>(P) * (N + 1) * d, 0.0);
    out.U.assign(out.Y.size(), 0.0);
    out.V.assign(out.Y.size(), 0.0);
    out.M.assign(out.Y.size(), 0.0);
    out.Z.assign(static_cast<std::size_t>(P) * N * d * m, 0.0);
    out.Ztilde.assign(out.Z.size(), 0.0);

    // terminal node: Y_N = xi, U_N = 0
    for (int p = 0; p < P; ++p)
        for (int j = 0; j < d; ++j) out.Y[out.node_index(p, N, j)] = xi[static_cast<std::size_t>(p) * d + j];

    const int xd = problem.generator.x_dim;
    const int nodes = grid.nodes();

    std::vector<double> F(static_cast<std::size_t>(P) * N * d, 0.0); // f_s dt
    std::vector<double> tail_delayed(static_cast<std::size_t>(P) * d, 0.0); // sum_{s>=k+D} F
    std::vector<double> tail_full(static_cast<std::size_t>(P) * d, 0.0);    // sum_{s>=k} F
    std::vector<double> ytilde_next(xi); // (Y+U)_{k+1}, starts at xi
    std::vector<double> targets(static_cast<std::size_t>(P) * d, 0.0);
    std::vector<double> dM(static_cast<std::size_t>(P) * d, 0.0);
    std::vector<double> dW(static_cast<std::size_t>(P) * m, 0.0);

    auto f_at = [&](std::size_t pn) { return F.data() + pn * d; };

    for (int k = N - 1; k >= 0; --k) {
        // delayed kernel enters the running tail once it is D steps ahead
        if (k + D <= N - 1) {
            for (int p = 0; p < P; ++p) {
                const double* fkd = f_at(static_cast<std::size_t>(p) * N + (k + D));
                for (int j = 0; j < d; ++j)
                    tail_delayed[static_cast<std::size_t>(p) * d + j] += fkd[j];
            }
            // Ztilde_k = E-hat[Z_{k+D} | node k]
            std::vector<double> ztargets(static_cast<std::size_t>(P) * d * m);
            for (int p = 0; p < P; ++p)
                for (int j = 0; j < d; ++j)
                    for (int l = 0; l < m; ++l)
                        ztargets[(static_cast<std::size_t>(p) * d + j) * m + l] =
                            out.Z[out.step_index(p, k + D, j, l)];
            const std::vector<double> zt = engine->project(k, ztargets, d * m);
            for (int p = 0; p < P; ++p)
                for (int j = 0; j < d; ++j)
                    for (int l = 0; l < m; ++l)
                        out.Ztilde[out.step_index(p, k, j, l)] =
                            zt[(static_cast<std::size_t>(p) * d + j) * m + l];
        } // else: no kernel exists D steps ahead, Ztilde stays 0

        // Y_k = E-hat[xi + tail_delayed | node k]
        for (int p = 0; p < P; ++p)
            for (int j = 0; j < d; ++j)
                targets[static_cast<std::size_t>(p) * d + j] =
                    xi[static_cast<std::size_t>(p) * d + j] +
                    tail_delayed[static_cast<std::size_t>(p) * d + j];
        {
            const std::vector<double> yk = engine->project(k, targets, d);
            for (int p = 0; p < P; ++p)
                for (int j = 0; j < d; ++j)
                    out.Y[out.node_index(p, k, j)] = yk[static_cast<std::size_t>(p) * d + j];
        }

        // f_k dt at (t_k, X_k, Y_k, Ztilde_k); path-parallel, writes are
        // disjoint per path
        const double tk = grid.node(k);
        std::atomic<bool> finite{true};
        detail::parallel_for_ranges(P, [&](int lo, int hi) {
            std::vector<double> fv(static_cast<std::size_t>(d), 0.0);
            for (int p = lo; p < hi; ++p) {
                std::span<const double> xk =
                    xd > 0 ? std::span<const double>{x.data() + (static_cast<std::size_t>(p) *
                                                                     nodes + k) * xd,
                                                     static_cast<std::size_t>(xd)}
                           : std::span<const double>{};
                std::span<const double> yk{out.Y.data() + out.node_index(p, k, 0),
                                           static_cast<std::size_t>(d)};
                std::span<const double> ztk{out.Ztilde.data() + out.step_index(p, k, 0, 0),
                                            static_cast<std::size_t>(d) * m};
                eval_generator(problem.generator, tk, xk, yk, ztk, fv);
                double* fk = f_at(static_cast<std::size_t>(p) * N + k);
                for (int j = 0; j < d; ++j) {
                    if (!std::isfinite(fv[static_cast<std::size_t>(j)])) finite = false;
                    fk[j] = fv[static_cast<std::size_t>(j)] * dt;
                    tail_full[static_cast<std::size_t>(p) * d + j] += fk[j];
                }
            }
        });
        if (!finite) throw NumericalError("generator produced a non-finite value");

        // U_k = E-hat[window sum | node k], window = tail_full - tail_delayed
        for (int p = 0; p < P; ++p)
            for (int j = 0; j < d; ++j)
                targets[static_cast<std::size_t>(p) * d + j] =
                    tail_full[static_cast<std::size_t>(p) * d + j] -
                    tail_delayed[static_cast<std::size_t>(p) * d + j];
        {
            const std::vector<double> uk = engine->project(k, targets, d);
            for (int p = 0; p < P; ++p)
                for (int j = 0; j < d; ++j)
                    out.U[out.node_index(p, k, j)] = uk[static_cast<std::size_t>(p) * d + j];
        }

        // Z_k from the one-step martingale increment:
        // dM_k = (Y+U)_{k+1} - (Y+U)_k + f_k dt. The subtracted node-k part
        // is known at node k, so it only removes variance from the fit.
        for (int p = 0; p < P; ++p) {
            const double* fk = f_at(static_cast<std::size_t>(p) * N + k);
            for (int j = 0; j < d; ++j) {
                const double ytilde_k =
                    out.Y[out.node_index(p, k, j)] + out.U[out.node_index(p, k, j)];
                dM[static_cast<std::size_t>(p) * d + j] =
                    ytilde_next[static_cast<std::size_t>(p) * d + j] - ytilde_k + fk[j];
            }
            for (int l = 0; l < m; ++l)
                dW[static_cast<std::size_t>(p) * m + l] = ensemble.increment(p, k, l);
        }
        {
            const std::vector<double> zk = extract_Z(dM, d, dW, m, dt, *engine, k);
            for (int p = 0; p < P; ++p)
                for (int j = 0; j < d; ++j)
                    for (int l = 0; l < m; ++l)
                        out.Z[out.step_index(p, k, j, l)] =
                            zk[(static_cast<std::size_t>(p) * d + j) * m + l];
        }

        for (int p = 0; p < P; ++p)
            for (int j = 0; j < d; ++j)
                ytilde_next[static_cast<std::size_t>(p) * d + j] =
                    out.Y[out.node_index(p, k, j)] + out.U[out.node_index(p, k, j)];
    }

    // V: forward accumulation of Z dW; M = V + mean(xi + sum f dt)
    std::vector<double> m0(static_cast<std::size_t>(d), 0.0);
    for (int p = 0; p < P; ++p)
        for (int j = 0; j < d; ++j)
            m0[static_cast<std::size_t>(j)] += xi[static_cast<std::size_t>(p) * d + j] +
                                               tail_full[static_cast<std::size_t>(p) * d + j];
    for (int j = 0; j < d; ++j) m0[static_cast<std::size_t>(j)] /= static_cast<double>(P);

    for (int p = 0; p < P; ++p) {
        for (int j = 0; j < d; ++j) out.M[out.node_index(p, 0, j)] = m0[static_cast<std::size_t>(j)];
        for (int k = 0; k < N; ++k) {
            for (int j = 0; j < d; ++j) {
                double zdw = 0.0;
                for (int l = 0; l < m; ++l)
                    zdw += out.Z[out.step_index(p, k, j, l)] * ensemble.increment(p, k, l);
                const double v_next = out.V[out.node_index(p, k, j)] + zdw;
                out.V[out.node_index(p, k + 1, j)] = v_next;
                out.M[out.node_index(p, k + 1, j)] = v_next + m0[static_cast<std::size_t>(j)];
            }
        }
    }
    return out;
}

ResidualReport residual_bsde(const SchemeOutput& output, const ProblemSpec& problem,
                             const PathEnsemble& ensemble) {
    const TimeGrid& grid = output.grid;
    const int N = grid.steps;
    const int P = output.paths;
    const int d = output.y_dim;
    const int m = output.w_dim;
    const int xd = problem.generator.x_dim;
    const int nodes = grid.nodes();
    const double dt = grid.dt();
    require(ensemble.paths == P && ensemble.grid.steps == N,
            "residual_bsde: output and ensemble are misaligned");

    const std::vector<double> x = build_forward_states(problem, ensemble);
    const std::vector<double> xi = evaluate_terminal(problem, ensemble, x);

    ResidualReport report;
    report.mean_norm_profile.assign(static_cast<std::size_t>(N) + 1, 0.0);

    std::vector<double> fval(static_cast<std::size_t>(d), 0.0);
    std::vector<double> tail(static_cast<std::size_t>(d), 0.0);
    for (int p = 0; p < P; ++p) {
        std::fill(tail.begin(), tail.end(), 0.0);
        // node N: R = Y_N - xi
        {
            double norm = 0.0;
            for (int j = 0; j < d; ++j) {
                const double r =
                    output.y(p, N, j) - xi[static_cast<std::size_t>(p) * d + j];
                norm += r * r;
                if (std::fabs(r) > report.max_abs) {
                    report.max_abs = std::fabs(r);
                    report.argmax_path = p;
                    report.argmax_node = N;
                }
            }
            report.mean_norm_profile[static_cast<std::size_t>(N)] += std::sqrt(norm);
        }
        for (int k = N - 1; k >= 0; --k) {
            std::span<const double> xk =
                xd > 0 ? std::span<const double>{x.data() +
                                                     (static_cast<std::size_t>(p) * nodes + k) * xd,
                                                 static_cast<std::size_t>(xd)}
                       : std::span<const double>{};
            std::span<const double> yk{output.Y.data() + output.node_index(p, k, 0),
                                       static_cast<std::size_t>(d)};
            std::span<const double> ztk{output.Ztilde.data() + output.step_index(p, k, 0, 0),
                                        static_cast<std::size_t>(d) * m};
            eval_generator(problem.generator, grid.node(k), xk, yk, ztk, fval);
            double norm = 0.0;
            for (int j = 0; j < d; ++j) {
                tail[static_cast<std::size_t>(j)] += fval[static_cast<std::size_t>(j)] * dt;
                const double r = output.y(p, k, j) -
                                 (xi[static_cast<std::size_t>(p) * d + j] +
                                  tail[static_cast<std::size_t>(j)] -
                                  (output.v(p, N, j) - output.v(p, k, j)) - output.u(p, k, j));
                norm += r * r;
                if (std::fabs(r) > report.max_abs) {
                    report.max_abs = std::fabs(r);
                    report.argmax_path = p;
                    report.argmax_node = k;
                }
            }
            report.mean_norm_profile[static_cast<std::size_t>(k)] += std::sqrt(norm);
        }
    }
    for (double& v : report.mean_norm_profile) v /= static_cast<double>(P);
    return report;
}

std::vector<double> generator_tail_integral(const SchemeOutput& output,
                                            const ProblemSpec& problem,
                                            const PathEnsemble& ensemble) {
    const TimeGrid& grid = output.grid;
    const int N = grid.steps;
    const int P = output.paths;
    const int d = output.y_dim;
    const int m = output.w_dim;
    const int xd = problem.generator.x_dim;
    const int nodes = grid.nodes();
    const double dt = grid.dt();
    require(ensemble.paths == P && ensemble.grid.steps == N,
            "generator_tail_integral: output and ensemble are misaligned");

    const std::vector<double> x = build_forward_states(problem, ensemble);
    std::vector<double> out(static_cast<std::size_t>(P) * nodes * d, 0.0);
    std::vector<double> fval(static_cast<std::size_t>(d), 0.0);
    for (int p = 0; p < P; ++p) {
        for (int k = N - 1; k >= 0; --k) {
            std::span<const double> xk =
                xd > 0 ? std::span<const double>{x.data() +
                                                     (static_cast<std::size_t>(p) * nodes + k) * xd,
                                                 static_cast<std::size_t>(xd)}
                       : std::span<const double>{};
            std::span<const double> yk{output.Y.data() + output.node_index(p, k, 0),
                                       static_cast<std::size_t>(d)};
            std::span<const double> ztk{output.Ztilde.data() + output.step_index(p, k, 0, 0),
                                        static_cast<std::size_t>(d) * m};
            eval_generator(problem.generator, grid.node(k), xk, yk, ztk, fval);
            for (int j = 0; j < d; ++j)
                out[output.node_index(p, k, j)] =
                    out[output.node_index(p, k + 1, j)] + fval[static_cast<std::size_t>(j)] * dt;
        }
    }
    return out;
}

DelayGapReport delay_shift_gap(const SchemeOutput& output, const ProblemSpec& problem,
                               const PathEnsemble& ensemble) {
    if (!problem.generator.affine)
        throw ConfigError("delay_shift_gap: problem \"" + problem.name +
                          "\" has no affine representation");
    const TimeGrid& grid = output.grid;
    const int N = grid.steps;
    const int P = output.paths;
    const int d = output.y_dim;
    const int m = output.w_dim;
    const int xd = problem.generator.x_dim;
    const int nodes = grid.nodes();
    const double dt = grid.dt();
    require(ensemble.paths == P && ensemble.grid.steps == N,
            "delay_shift_gap: output and ensemble are misaligned");

    const std::vector<double> x = build_forward_states(problem, ensemble);

    std::vector<double> shift(static_cast<std::size_t>(P), 0.0);
    std::vector<double> weighted(static_cast<std::size_t>(P), 0.0);
    std::vector<double> alpha(static_cast<std::size_t>(problem.generator.alpha_size()), 0.0);
    std::vector<double> acc(static_cast<std::size_t>(d), 0.0);

    for (int p = 0; p < P; ++p) {
        double g = 0.0;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int k = 0; k < N; ++k) {
            // ||Ztilde - Z||^2 contribution
            double n2 = 0.0;
            for (int j = 0; j < d; ++j)
                for (int l = 0; l < m; ++l) {
                    const double diff = output.ztilde(p, k, j, l) - output.z(p, k, j, l);
                    n2 += diff * diff;
                }
            g += n2 * dt;

            // alpha(t, X, Y) applied to (Ztilde - Z)
            if (problem.generator.alpha) {
                std::span<const double> xk =
                    xd > 0
                        ? std::span<const double>{x.data() + (static_cast<std::size_t>(p) * nodes +
                                                              k) * xd,
                                                  static_cast<std::size_t>(xd)}
                        : std::span<const double>{};
                std::span<const double> yk{output.Y.data() + output.node_index(p, k, 0),
                                           static_cast<std::size_t>(d)};
                problem.generator.alpha(grid.node(k), xk, yk, alpha);
                for (int i = 0; i < d; ++i) {
                    double s = 0.0;
                    const double* row = alpha.data() + static_cast<std::size_t>(i) * d * m;
                    for (int j = 0; j < d; ++j)
                        for (int l = 0; l < m; ++l)
                            s += row[static_cast<std::size_t>(j) * m + l] *
                                 (output.ztilde(p, k, j, l) - output.z(p, k, j, l));
                    acc[static_cast<std::size_t>(i)] += s * dt;
                }
            }
        }
        shift[static_cast<std::size_t>(p)] = g;
        double n = 0.0;
        for (int j = 0; j < d; ++j) n += acc[static_cast<std::size_t>(j)] * acc[static_cast<std::size_t>(j)];
        weighted[static_cast<std::size_t>(p)] = std::sqrt(n);
    }

    DelayGapReport report;
    mean_and_se(shift, report.shift_l2_mean, report.shift_l2_se);
    mean_and_se(weighted, report.weighted_mean, report.weighted_se);
    return report;
}

} // namespace bsde
