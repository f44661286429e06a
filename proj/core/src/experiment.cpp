#include "bsde/experiment.hpp"

#include "bsde/ensemble_io.hpp"
#include "bsde/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace bsde {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kArtifactVersion = "0.1.0";

const std::set<std::string> kKnownKeys = {
    "problem", "generator", "T", "N", "D", "D_list", "paths", "seed",
    "engine", "basis", "ridge", "diagnostics", "energy_lambda2", "u_decay_q",
    "ut_random_controls", "output_dir", "emit_ensemble", "emit_outputs",
    "emit_text_report"};

const std::set<std::string> kKnownDiagnostics = {
    "l2", "residual", "energy", "delay_gap", "cv", "ut", "aldous", "martingale"};

class StageTimer {
public:
    explicit StageTimer(std::map<std::string, double>& sink) : sink_(sink) {}

    template <class F>
    auto run(const std::string& stage, F&& f) {
        const auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            sink_[stage] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        } else {
            auto result = f();
            sink_[stage] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            return result;
        }
    }

private:
    std::map<std::string, double>& sink_;
};

std::string iso8601_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << content;
    if (!os) throw IoError("short write: " + path);
}

OutputFileRecord record_file(const std::string& dir, const std::string& name) {
    OutputFileRecord rec;
    rec.name = name;
    const std::string path = dir + "/" + name;
    rec.bytes = static_cast<std::uint64_t>(fs::file_size(path));
    rec.checksum = file_checksum(path);
    return rec;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

} // namespace

bool ExperimentConfig::diagnostics_enabled(const std::string& name) const {
    if (diagnostics.empty()) return true;
    return std::find(diagnostics.begin(), diagnostics.end(), name) != diagnostics.end();
}

namespace {

struct AffineTensors {
    int y_dim = 0;
    int w_dim = 0;
    std::vector<double> alpha; // d x d x m, flattened
    std::vector<double> beta;  // d
};

AffineTensors parse_generator_tensors(const json& g) {
    const json& alpha = g.at("alpha");
    const json& beta = g.at("beta");
    if (!alpha.is_array() || alpha.empty())
        throw ConfigError("generator.alpha must be a d x d x m array");
    if (!beta.is_array() || beta.empty())
        throw ConfigError("generator.beta must be a length-d array");

    AffineTensors t;
    t.y_dim = static_cast<int>(beta.size());
    if (static_cast<int>(alpha.size()) != t.y_dim)
        throw ConfigError("generator.alpha outer dimension must equal len(beta)");
    t.w_dim = -1;
    try {
        for (const json& row : alpha) {
            if (!row.is_array() || static_cast<int>(row.size()) != t.y_dim)
                throw ConfigError("generator.alpha middle dimension must equal len(beta)");
            for (const json& inner : row) {
                if (!inner.is_array())
                    throw ConfigError("generator.alpha must be a d x d x m array");
                if (t.w_dim < 0) t.w_dim = static_cast<int>(inner.size());
                if (static_cast<int>(inner.size()) != t.w_dim || t.w_dim == 0)
                    throw ConfigError("generator.alpha inner arrays must share one length m >= 1");
                for (const json& v : inner) t.alpha.push_back(v.get<double>());
            }
        }
        for (const json& v : beta) t.beta.push_back(v.get<double>());
    } catch (const json::exception& e) {
        throw ConfigError(std::string("generator tensors must be numeric: ") + e.what());
    }
    return t;
}

} // namespace

ExperimentConfig parse_config(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");

    for (const auto& [key, value] : doc.items()) {
        (void)value;
        if (!kKnownKeys.contains(key)) throw ConfigError("unknown config key \"" + key + "\"");
    }

    ExperimentConfig c;
    try {
        if (doc.contains("problem")) c.problem = doc["problem"].get<std::string>();
        if (doc.contains("generator")) {
            const json& g = doc["generator"];
            if (!g.is_object() || !g.contains("alpha") || !g.contains("beta"))
                throw ConfigError("generator must be an object with alpha and beta arrays");
            for (const auto& [key, value] : g.items()) {
                (void)value;
                if (key != "alpha" && key != "beta")
                    throw ConfigError("unknown generator key \"" + key + "\"");
            }
            parse_generator_tensors(g); // shape and type check up front
            c.custom_generator_json = g.dump();
            if (!doc.contains("problem")) c.problem = "custom";
        }
        if (doc.contains("T")) c.horizon = doc["T"].get<double>();
        if (doc.contains("N")) c.steps = doc["N"].get<int>();
        if (doc.contains("D")) c.delay_steps = doc["D"].get<int>();
        if (doc.contains("D_list")) c.delay_list = doc["D_list"].get<std::vector<int>>();
        if (doc.contains("paths")) c.paths = doc["paths"].get<int>();
        if (doc.contains("seed")) c.seed = doc["seed"].get<std::uint64_t>();
        if (doc.contains("engine")) c.engine = doc["engine"].get<std::string>();
        if (doc.contains("basis")) c.basis = doc["basis"].get<std::string>();
        if (doc.contains("ridge")) c.ridge = doc["ridge"].get<double>();
        if (doc.contains("diagnostics"))
            c.diagnostics = doc["diagnostics"].get<std::vector<std::string>>();
        if (doc.contains("energy_lambda2")) c.energy_lambda2 = doc["energy_lambda2"].get<double>();
        if (doc.contains("u_decay_q")) c.u_decay_q = doc["u_decay_q"].get<double>();
        if (doc.contains("ut_random_controls"))
            c.ut_random_controls = doc["ut_random_controls"].get<int>();
        if (doc.contains("output_dir")) c.output_dir = doc["output_dir"].get<std::string>();
        if (doc.contains("emit_ensemble")) c.emit_ensemble = doc["emit_ensemble"].get<bool>();
        if (doc.contains("emit_outputs")) c.emit_outputs = doc["emit_outputs"].get<bool>();
        if (doc.contains("emit_text_report"))
            c.emit_text_report = doc["emit_text_report"].get<bool>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config value: ") + e.what());
    }

    if (!(c.horizon > 0.0)) throw ConfigError("T must be > 0");
    if (c.steps < 1) throw ConfigError("N must be >= 1");
    if (c.paths < 1) throw ConfigError("paths must be >= 1");
    if (c.ridge < 0.0) throw ConfigError("ridge must be >= 0");
    if (c.engine != "regression" && c.engine != "tree")
        throw ConfigError("engine must be \"regression\" or \"tree\"");
    if (c.delay_steps < 1 || c.delay_steps > c.steps)
        throw ConfigError("D must lie in [1, N]");
    for (int D : c.delay_list)
        if (D < 1 || D > c.steps) throw ConfigError("D_list entries must lie in [1, N]");
    for (const std::string& name : c.diagnostics)
        if (!kKnownDiagnostics.contains(name))
            throw ConfigError("unknown diagnostics toggle \"" + name + "\"");
    if (c.u_decay_q < 1.0 || c.u_decay_q >= 2.0) throw ConfigError("u_decay_q must lie in [1, 2)");
    if (c.ut_random_controls < 1) throw ConfigError("ut_random_controls must be >= 1");

    if (const char* dir = std::getenv("BSDE_OUTPUT_DIR")) c.output_dir = dir;
    return c;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::uint64_t config_hash(const ExperimentConfig& c) {
    json doc;
    doc["problem"] = c.problem;
    if (c.custom_generator_json) doc["generator"] = json::parse(*c.custom_generator_json);
    doc["T"] = c.horizon;
    doc["N"] = c.steps;
    doc["D"] = c.delay_steps;
    doc["D_list"] = c.delay_list;
    doc["paths"] = c.paths;
    doc["seed"] = c.seed;
    doc["engine"] = c.engine;
    doc["basis"] = c.basis;
    doc["ridge"] = c.ridge;
    doc["diagnostics"] = c.diagnostics;
    doc["energy_lambda2"] = c.energy_lambda2;
    doc["u_decay_q"] = c.u_decay_q;
    doc["ut_random_controls"] = c.ut_random_controls;
    const std::string canonical = doc.dump();
    return fnv1a64(canonical.data(), canonical.size());
}

ProblemSpec resolve_problem(const ExperimentConfig& config) {
    if (!config.custom_generator_json) return find_problem(config.problem);

    const AffineTensors t = parse_generator_tensors(json::parse(*config.custom_generator_json));
    const int d = t.y_dim;
    const int m = t.w_dim;
    const std::vector<double> tensor = t.alpha;
    const std::vector<double> shift = t.beta;

    double alpha_norm = 0.0, beta_norm = 0.0;
    for (double v : tensor) alpha_norm += v * v;
    for (double v : shift) beta_norm += v * v;

    ProblemSpec p;
    p.name = "custom";
    p.description = "inline affine generator from config";
    p.generator.y_dim = d;
    p.generator.w_dim = m;
    p.generator.x_dim = 0;
    p.generator.growth_K = std::max(std::sqrt(alpha_norm), std::sqrt(beta_norm)) + 1e-12;
    p.generator.alpha = [tensor](double, std::span<const double>, std::span<const double>,
                                 std::span<double> out) {
        std::copy(tensor.begin(), tensor.end(), out.begin());
    };
    p.generator.beta = [shift](double, std::span<const double>, std::span<const double>,
                               std::span<double> out) {
        std::copy(shift.begin(), shift.end(), out.begin());
    };
    p.forward = [](const TimeGrid&, std::span<const double>, std::span<double>) {};
    p.terminal = [d, m](const TimeGrid& grid, std::span<const double> w_path,
                        std::span<const double>, std::span<double> xi) {
        for (int j = 0; j < d; ++j)
            xi[static_cast<std::size_t>(j)] = std::tanh(
                w_path[static_cast<std::size_t>(grid.steps) * m + (j % m)]);
    };
    p.state_dim = m;
    p.state_features = [m](const TimeGrid&, int k, std::span<const double> w_path,
                           std::span<const double>, std::span<double> s) {
        for (int l = 0; l < m; ++l)
            s[static_cast<std::size_t>(l)] = w_path[static_cast<std::size_t>(k) * m + l];
    };
    return p;
}

namespace {

EngineConfig engine_config(const ExperimentConfig& c) {
    EngineConfig e;
    e.kind = c.engine == "tree" ? EngineConfig::Kind::tree_exact : EngineConfig::Kind::regression;
    e.basis = c.basis;
    e.ridge = c.ridge;
    return e;
}

PathEnsemble make_run_ensemble(const ExperimentConfig& c, const ProblemSpec& problem) {
    if (c.engine == "tree") {
        if (problem.generator.w_dim != 1)
            throw ConfigError("tree engine supports one-dimensional Brownian problems only");
        return enumerate_tree_paths(build_tree(c.steps, c.horizon), c.delay_steps);
    }
    const TimeGrid grid = build_grid(c.horizon, c.steps, c.delay_steps);
    return sample_brownian(grid, problem.generator.w_dim, c.paths, c.seed);
}

DiagnosticEntry info_entry(std::string id, int D, double estimate, double se, long n,
                           std::uint64_t seed, std::string time_label = "global") {
    DiagnosticEntry e;
    e.id = std::move(id);
    e.delay_steps = D;
    e.time_label = std::move(time_label);
    e.estimate = estimate;
    e.std_error = se;
    e.verdict = Verdict::info;
    e.sample_size = n;
    e.seed = seed;
    return e;
}

std::string label(const char* prefix, double v) {
    std::ostringstream os;
    os << prefix << v;
    return os.str();
}

// history array [P][N+1][S] for the residual tables
std::vector<double> flatten_states(const std::vector<std::vector<double>>& table, int paths,
                                   int state_dim) {
    const int nodes = static_cast<int>(table.size());
    std::vector<double> out(static_cast<std::size_t>(paths) * nodes * state_dim);
    for (int k = 0; k < nodes; ++k)
        for (int p = 0; p < paths; ++p)
            for (int s = 0; s < state_dim; ++s)
                out[(static_cast<std::size_t>(p) * nodes + k) * state_dim + s] =
                    table[static_cast<std::size_t>(k)][static_cast<std::size_t>(p) * state_dim + s];
    return out;
}

DiagnosticsReport run_diagnostics(const ExperimentConfig& config, const ProblemSpec& problem,
                                  const PathEnsemble& ensemble, const SchemeOutput& output) {
    DiagnosticsReport report;
    const int D = output.delay_steps;
    const std::uint64_t seed = output.seed;
    const long P = output.paths;
    const double K = problem.generator.growth_K;
    const TimeGrid& grid = output.grid;

    if (config.diagnostics_enabled("l2")) report.extend(l2_bounds(output));

    if (config.diagnostics_enabled("residual")) {
        const ResidualReport rr = residual_bsde(output, problem, ensemble);
        report.add(info_entry("residual_max", D, rr.max_abs, 0.0, P, seed));
        TimeGrid blocked = grid;
        blocked.delay_steps = D;
        for (int b : blocked.block_boundaries())
            report.add(info_entry("residual_mean", D,
                                  rr.mean_norm_profile[static_cast<std::size_t>(b)], 0.0, P, seed,
                                  label("", grid.node(b))));
    }

    if (config.diagnostics_enabled("energy")) {
        const double lambda2 =
            config.energy_lambda2 > 0.0 ? config.energy_lambda2 : std::max(4.0 * K, 1.0);
        report.extend(z_energy_inequality(output, K, lambda2));
    }

    if (config.diagnostics_enabled("delay_gap") && problem.generator.affine) {
        const DelayGapReport gap = delay_shift_gap(output, problem, ensemble);
        report.add(info_entry("delay_gap_shift_l2", D, gap.shift_l2_mean, gap.shift_l2_se, P, seed));
        report.add(info_entry("delay_gap_weighted", D, gap.weighted_mean, gap.weighted_se, P, seed));
    }

    const bool want_cv = config.diagnostics_enabled("cv");
    const bool want_ut = config.diagnostics_enabled("ut");
    const bool want_mart = config.diagnostics_enabled("martingale");
    std::unique_ptr<CondExpEngine> engine;
    if (want_cv || want_ut) engine = make_engine(problem, ensemble, engine_config(config));

    if (want_cv) {
        TimeGrid blocked = grid;
        blocked.delay_steps = D;
        std::vector<int> blocks = blocked.block_boundaries();
        std::sort(blocks.begin(), blocks.end());
        const CondVarEstimate cv_blocks =
            conditional_variation(output.Y, output.y_dim, grid, blocks, *engine);
        report.add(info_entry("cv_Y_blocks", D, cv_blocks.estimate, cv_blocks.std_error, P, seed));

        std::vector<int> full(static_cast<std::size_t>(grid.nodes()));
        for (int k = 0; k <= grid.steps; ++k) full[static_cast<std::size_t>(k)] = k;
        const CondVarEstimate cv_full =
            conditional_variation(output.Y, output.y_dim, grid, full, *engine);
        report.add(info_entry("cv_Y_full", D, cv_full.estimate, cv_full.std_error, P, seed));

        const CvBound bound = cv_quasimartingale_bound(output, K);
        DiagnosticEntry e;
        e.id = "cv_bound_margin";
        e.delay_steps = D;
        e.estimate = bound.value - cv_full.estimate;
        e.std_error = std::sqrt(bound.std_error * bound.std_error +
                                cv_full.std_error * cv_full.std_error);
        e.threshold = 0.0;
        e.verdict = e.estimate + 2.0 * e.std_error >= 0.0 ? Verdict::pass : Verdict::fail;
        e.sample_size = P;
        e.seed = seed;
        report.add(std::move(e));
    }

    if (want_ut) {
        const UtStatistics ut = ut_statistic(output.Y, output.y_dim, grid, *engine,
                                             config.ut_random_controls, seed);
        report.add(info_entry("ut_adversarial", D, ut.adversarial_mean, ut.adversarial_se, P, seed));
        report.add(info_entry("ut_q50", D, ut.quantile50, 0.0, P, seed));
        report.add(info_entry("ut_q99", D, ut.quantile99, 0.0, P, seed));
    }

    if (config.diagnostics_enabled("aldous")) {
        const std::vector<double> tail = generator_tail_integral(output, problem, ensemble);
        const double T = grid.horizon;
        const std::vector<double> deltas = {T / 16.0, T / 8.0, T / 4.0};
        const AldousStatistics aldous =
            aldous_statistics(tail, output.y_dim, grid, {}, deltas);
        for (const AldousTailRow& row : aldous.tail)
            report.add(info_entry("aldous_tail", D, row.tail_probability, 0.0, P, seed,
                                  label("R=", row.radius)));

        // threshold: delta^{1/2} K (1 + E-hat int ||Ztilde||^2)^{1/2}
        double zt2 = 0.0;
        for (int p = 0; p < output.paths; ++p)
            for (int k = 0; k < grid.steps; ++k)
                for (int j = 0; j < output.y_dim; ++j)
                    for (int l = 0; l < output.w_dim; ++l)
                        zt2 += output.ztilde(p, k, j, l) * output.ztilde(p, k, j, l);
        zt2 = zt2 * grid.dt() / output.paths;
        for (const AldousIncrementRow& row : aldous.bcurve) {
            DiagnosticEntry e;
            e.id = "aldous_B";
            e.delay_steps = D;
            e.time_label = label("delta=", row.delta);
            e.estimate = row.value;
            e.std_error = row.std_error;
            e.threshold = std::sqrt(row.delta) * K * std::sqrt(1.0 + zt2);
            e.verdict = e.estimate <= *e.threshold + 2.0 * e.std_error ? Verdict::pass
                                                                       : Verdict::fail;
            e.sample_size = P;
            e.seed = seed;
            report.add(std::move(e));
        }
    }

    if (want_mart) {
        const std::vector<double> history =
            flatten_states(build_state_table(problem, ensemble), output.paths, problem.state_dim);
        const std::vector<std::pair<int, int>> pairs = default_node_pairs(grid);
        const MartingaleResidualTable table = martingale_residuals(
            output.V, output.y_dim, history, problem.state_dim, grid, pairs);
        DiagnosticEntry e;
        e.id = "mart_V_pass_fraction";
        e.delay_steps = D;
        e.estimate = table.pass_fraction;
        e.threshold = 0.95;
        e.verdict = table.verdict;
        e.sample_size = static_cast<long>(table.cells.size());
        e.seed = seed;
        report.add(std::move(e));
    }

    return report;
}

struct SchemeFileSet {
    std::vector<std::string> names;
};

SchemeFileSet write_scheme_output(const SchemeOutput& out, const std::string& dir,
                                  const std::string& basis) {
    SchemeFileSet files;
    EnsembleHeader h;
    h.horizon = out.grid.horizon;
    h.steps = static_cast<std::uint64_t>(out.grid.steps);
    h.delay_steps = static_cast<std::uint64_t>(out.delay_steps);
    h.paths = static_cast<std::uint64_t>(out.paths);
    h.seed = out.seed;

    const auto node_array = [&](const char* name, const std::vector<double>& v) {
        EnsembleHeader hh = h;
        hh.dims = static_cast<std::uint64_t>(out.y_dim);
        write_array_file(dir + "/scheme_" + name + ".bin", hh, v);
        files.names.push_back(std::string("scheme_") + name + ".bin");
    };
    node_array("Y", out.Y);
    node_array("U", out.U);
    node_array("V", out.V);
    node_array("M", out.M);

    const auto step_array = [&](const char* name, const std::vector<double>& v) {
        EnsembleHeader hh = h;
        hh.steps = static_cast<std::uint64_t>(out.grid.steps - 1); // N nodes per path
        hh.dims = static_cast<std::uint64_t>(out.y_dim * out.w_dim);
        write_array_file(dir + "/scheme_" + name + ".bin", hh, v);
        files.names.push_back(std::string("scheme_") + name + ".bin");
    };
    step_array("Z", out.Z);
    step_array("Ztilde", out.Ztilde);

    json sidecar;
    sidecar["problem"] = out.problem;
    sidecar["D"] = out.delay_steps;
    sidecar["basis"] = basis;
    sidecar["engine"] = out.engine;
    sidecar["seed"] = out.seed;
    sidecar["T"] = out.grid.horizon;
    sidecar["N"] = out.grid.steps;
    sidecar["paths"] = out.paths;
    sidecar["y_dim"] = out.y_dim;
    sidecar["w_dim"] = out.w_dim;
    sidecar["written_at"] = iso8601_now();
    write_text_file(dir + "/scheme_manifest.json", sidecar.dump(2) + "\n");
    files.names.push_back("scheme_manifest.json");
    return files;
}

RunManifest finalize_manifest(const ExperimentConfig& config, const std::string& dir,
                              const std::vector<std::string>& files,
                              std::map<std::string, double> stage_seconds, double wall) {
    RunManifest manifest;
    manifest.config_hash = config_hash(config);
    manifest.artifact_version = kArtifactVersion;
    manifest.seed = config.seed;
    manifest.wall_clock_seconds = wall;
    manifest.stage_seconds = std::move(stage_seconds);
    for (const std::string& f : files) manifest.outputs.push_back(record_file(dir, f));

    json doc;
    doc["config_hash"] = hex64(manifest.config_hash);
    doc["artifact_version"] = manifest.artifact_version;
    doc["seed"] = manifest.seed;
    doc["wall_clock_seconds"] = manifest.wall_clock_seconds;
    doc["written_at"] = iso8601_now();
    for (const auto& [stage, secs] : manifest.stage_seconds) doc["stage_seconds"][stage] = secs;
    for (const OutputFileRecord& rec : manifest.outputs)
        doc["outputs"].push_back({{"file", rec.name},
                                  {"bytes", rec.bytes},
                                  {"fnv1a64", hex64(rec.checksum)}});

    const std::string path = dir + "/manifest.json";
    write_text_file(path + ".tmp", doc.dump(2) + "\n");
    fs::rename(path + ".tmp", path);
    manifest.manifest_path = path;
    return manifest;
}

} // namespace

RunManifest run_experiment(const ExperimentConfig& config) {
    const auto wall0 = std::chrono::steady_clock::now();
    std::map<std::string, double> stages;
    StageTimer timer(stages);

    const ProblemSpec problem = resolve_problem(config);
    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    if (ec) throw IoError("cannot create output directory " + config.output_dir);

    const PathEnsemble ensemble =
        timer.run("sample", [&] { return make_run_ensemble(config, problem); });
    const SchemeOutput output = timer.run("scheme", [&] {
        return run_scheme(problem, ensemble, config.delay_steps, engine_config(config));
    });
    const DiagnosticsReport report = timer.run("diagnostics", [&] {
        return run_diagnostics(config, problem, ensemble, output);
    });

    std::vector<std::string> files;
    timer.run("io", [&] {
        {
            std::ostringstream csv;
            write_csv(report, csv);
            write_text_file(config.output_dir + "/diagnostics.csv", csv.str());
            files.push_back("diagnostics.csv");
        }
        if (config.emit_text_report) {
            std::ostringstream text;
            write_text(report, text);
            write_text_file(config.output_dir + "/diagnostics.txt", text.str());
            files.push_back("diagnostics.txt");
        }
        if (config.emit_outputs) {
            const SchemeFileSet set = write_scheme_output(output, config.output_dir, config.basis);
            files.insert(files.end(), set.names.begin(), set.names.end());
        }
        if (config.emit_ensemble) {
            write_ensemble(ensemble, config.output_dir + "/ensemble.bin");
            files.push_back("ensemble.bin");
        }
    });

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    return finalize_manifest(config, config.output_dir, files, std::move(stages), wall);
}

RunManifest run_sweep(const ExperimentConfig& config) {
    if (config.delay_list.size() < 2)
        throw ConfigError("sweep requires at least two D_list values; use `run` for a single D");
    const auto wall0 = std::chrono::steady_clock::now();
    std::map<std::string, double> stages;
    StageTimer timer(stages);

    const ProblemSpec problem = resolve_problem(config);
    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    if (ec) throw IoError("cannot create output directory " + config.output_dir);

    // one ensemble shared by every D: paired comparisons across the sweep
    ExperimentConfig base = config;
    base.delay_steps = config.delay_list.front();
    const PathEnsemble ensemble =
        timer.run("sample", [&] { return make_run_ensemble(base, problem); });

    std::vector<SchemeOutput> outputs;
    DiagnosticsReport combined;
    std::vector<std::string> files;

    for (int D : config.delay_list) {
        const SchemeOutput output = timer.run("scheme", [&] {
            return run_scheme(problem, ensemble, D, engine_config(config));
        });
        combined.extend(timer.run("diagnostics", [&] {
            return run_diagnostics(config, problem, ensemble, output);
        }));
        if (config.emit_outputs || config.emit_ensemble) {
            const std::string subdir = config.output_dir + "/D" + std::to_string(D);
            fs::create_directories(subdir, ec);
            if (ec) throw IoError("cannot create output directory " + subdir);
            timer.run("io", [&] {
                if (config.emit_outputs) {
                    const SchemeFileSet set = write_scheme_output(output, subdir, config.basis);
                    for (const std::string& f : set.names)
                        files.push_back("D" + std::to_string(D) + "/" + f);
                }
                if (config.emit_ensemble) {
                    write_ensemble(ensemble, subdir + "/ensemble.bin");
                    files.push_back("D" + std::to_string(D) + "/ensemble.bin");
                }
            });
        }
        outputs.push_back(output);
    }

    timer.run("diagnostics", [&] {
        // per-D l2 rows are already present; keep only the boundedness verdicts
        for (const DiagnosticEntry& e : l2_bounds_sweep(outputs).entries)
            if (e.id.ends_with("_bounded")) combined.add(e);

        if (outputs.size() >= 3) {
            const UDecayStudy decay = u_decay_from_outputs(outputs, config.u_decay_q);
            for (const UDecayRow& row : decay.rows)
                combined.add(info_entry("u_decay_sup_q", row.delay_steps, row.estimate,
                                        row.std_error, config.paths, config.seed,
                                        label("h=", row.h)));
            DiagnosticEntry slope;
            slope.id = "u_decay_slope";
            slope.estimate = decay.slope;
            slope.std_error = decay.slope_se;
            slope.threshold = 0.0;
            slope.verdict = decay.degenerate_zero ? Verdict::info : decay.verdict;
            slope.sample_size = static_cast<long>(decay.rows.size());
            slope.seed = config.seed;
            combined.add(std::move(slope));
            combined.add(info_entry("u_decay_reference_rate", 0, decay.reference_rate, 0.0,
                                    static_cast<long>(decay.rows.size()), config.seed));
            DiagnosticEntry mono;
            mono.id = "u_decay_monotone";
            mono.estimate = decay.strictly_decreasing ? 1.0 : 0.0;
            mono.threshold = 1.0;
            mono.verdict = decay.degenerate_zero
                               ? Verdict::info
                               : (decay.strictly_decreasing ? Verdict::pass : Verdict::fail);
            mono.sample_size = static_cast<long>(decay.rows.size());
            mono.seed = config.seed;
            combined.add(std::move(mono));
        }

        // per-time law distances across the sweep
        const int N = config.steps;
        const std::vector<int> nodes = {N / 4, N / 2, 3 * N / 4};
        for (const LawDistanceRow& row : law_stabilization(outputs, nodes)) {
            DiagnosticEntry e = info_entry(
                "law_ks_" + row.component + "_D" + std::to_string(row.delay_a) + "_D" +
                    std::to_string(row.delay_b) + "_c" + std::to_string(row.coord),
                row.delay_b, row.ks_distance, 0.0, config.paths, config.seed,
                label("", outputs.front().grid.node(row.node)));
            combined.add(std::move(e));
        }

        // Condition UT uniformity: q99 of |int H dY| across D
        std::vector<double> q99s;
        for (const DiagnosticEntry& e : combined.entries)
            if (e.id == "ut_q99") q99s.push_back(e.estimate);
        if (q99s.size() >= 2) {
            std::vector<double> sorted(q99s);
            std::sort(sorted.begin(), sorted.end());
            const double med = sorted.size() % 2 == 1
                                   ? sorted[sorted.size() / 2]
                                   : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
            DiagnosticEntry e;
            e.id = "ut_uniformity";
            e.estimate = med > 0.0 ? sorted.back() / med : 1.0;
            e.threshold = 3.0;
            e.verdict = e.estimate <= 3.0 ? Verdict::pass : Verdict::fail;
            e.sample_size = static_cast<long>(q99s.size());
            e.seed = config.seed;
            combined.add(std::move(e));
        }

        // cross-delay probe of the orthogonal component: V from the finest
        // delay against the kernel of the coarsest delay
        if (outputs.size() >= 2) {
            const SchemeOutput* fine = &outputs.front();
            const SchemeOutput* coarse = &outputs.front();
            for (const SchemeOutput& out : outputs) {
                if (out.delay_steps < fine->delay_steps) fine = &out;
                if (out.delay_steps > coarse->delay_steps) coarse = &out;
            }
            const WeakLimitDecomposition wl =
                decompose_L(fine->V, coarse->Z, ensemble.increments, fine->paths,
                            fine->grid.steps, fine->y_dim, fine->w_dim);
            const std::vector<double> history =
                flatten_states(build_state_table(problem, ensemble), fine->paths,
                               problem.state_dim);
            const std::vector<std::pair<int, int>> pairs = default_node_pairs(fine->grid);
            const MartingaleResidualTable mart = martingale_residuals(
                wl.L, fine->y_dim, history, problem.state_dim, fine->grid, pairs);
            DiagnosticEntry lm;
            lm.id = "L_martingale_pass_fraction";
            lm.estimate = mart.pass_fraction;
            lm.threshold = 0.95;
            lm.verdict = mart.verdict;
            lm.sample_size = static_cast<long>(mart.cells.size());
            lm.seed = config.seed;
            combined.add(std::move(lm));

            long cells = 0, passed = 0;
            for (int i = 0; i < fine->y_dim; ++i)
                for (int j = 0; j < fine->w_dim; ++j) {
                    const std::vector<double> lw = coordinate_product(
                        wl.L, fine->y_dim, i, ensemble.values, ensemble.dims, j, fine->paths,
                        fine->grid.nodes());
                    const MartingaleResidualTable orth = martingale_residuals(
                        lw, 1, history, problem.state_dim, fine->grid, pairs);
                    cells += static_cast<long>(orth.cells.size());
                    for (const MartingaleResidualCell& c : orth.cells)
                        if (c.pass) ++passed;
                }
            DiagnosticEntry lo;
            lo.id = "L_orthogonality_pass_fraction";
            lo.estimate = cells > 0 ? static_cast<double>(passed) / static_cast<double>(cells) : 1.0;
            lo.threshold = 0.95;
            lo.verdict = lo.estimate >= 0.95 ? Verdict::pass : Verdict::fail;
            lo.sample_size = cells;
            lo.seed = config.seed;
            combined.add(std::move(lo));
        }
    });

    timer.run("io", [&] {
        std::ostringstream csv;
        write_csv(combined, csv);
        write_text_file(config.output_dir + "/sweep.csv", csv.str());
        files.push_back("sweep.csv");
        if (config.emit_text_report) {
            std::ostringstream text;
            write_text(combined, text);
            write_text_file(config.output_dir + "/sweep.txt", text.str());
            files.push_back("sweep.txt");
        }
    });

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    return finalize_manifest(config, config.output_dir, files, std::move(stages), wall);
}

ResidualReport run_oracle(const std::string& problem_name, int depth, int delay_steps) {
    const ProblemSpec& problem = find_problem(problem_name);
    if (problem.generator.w_dim != 1)
        throw ConfigError("oracle runs support one-dimensional Brownian problems only");
    const TreeModel tree = build_tree(depth, 1.0);
    const PathEnsemble ensemble = enumerate_tree_paths(tree, delay_steps);
    EngineConfig engine;
    engine.kind = EngineConfig::Kind::tree_exact;
    const SchemeOutput output = run_scheme(problem, ensemble, delay_steps, engine);
    return residual_bsde(output, problem, ensemble);
}

} // namespace bsde
