#pragma once

#include "bsde/diagnostics.hpp"
#include "bsde/problem_model.hpp"
#include "bsde/scheme.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bsde {

/// Validated experiment configuration. Parsed from a JSON file with a
/// strict schema: unknown keys are rejected by name. Only the
/// BSDE_OUTPUT_DIR and BSDE_THREADS environment variables override
/// anything.
struct ExperimentConfig {
    std::string problem = "P1";
    std::optional<std::string> custom_generator_json; // inline affine tensors

    double horizon = 1.0; // T
    int steps = 64;       // N
    int delay_steps = 1;  // D, single runs
    std::vector<int> delay_list; // sweeps
    int paths = 4096;
    std::uint64_t seed = 1;

    std::string engine = "regression"; // or "tree"
    std::string basis = "poly3";
    double ridge = 1e-8;

    std::vector<std::string> diagnostics; // empty = all applicable
    double energy_lambda2 = 0.0;          // 0 = auto (max(4K, 1))
    double u_decay_q = 1.0;
    int ut_random_controls = 64;

    std::string output_dir = "bsde-out";
    bool emit_ensemble = false;
    bool emit_outputs = true;
    bool emit_text_report = true;

    bool diagnostics_enabled(const std::string& name) const;
};

/// Parses and validates a config JSON document (text). Throws ConfigError
/// naming the offending field.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

/// Stable 64-bit hash of the canonical serialized config.
std::uint64_t config_hash(const ExperimentConfig& config);

/// Resolves the problem named by the config, building a custom affine
/// problem when inline generator tensors are present.
ProblemSpec resolve_problem(const ExperimentConfig& config);

struct OutputFileRecord {
    std::string name;
    std::uint64_t bytes = 0;
    std::uint64_t checksum = 0; // FNV-1a 64 of the file contents
};

struct RunManifest {
    std::uint64_t config_hash = 0;
    std::string artifact_version;
    std::uint64_t seed = 0;
    double wall_clock_seconds = 0.0;
    std::map<std::string, double> stage_seconds;
    std::vector<OutputFileRecord> outputs;
    std::string manifest_path;
};

/// sample -> scheme -> requested diagnostics -> files. Emits the scheme
/// arrays, the diagnostics CSV (and text report), and manifest.json in
/// the output directory; the manifest is written atomically last.
RunManifest run_experiment(const ExperimentConfig& config);

/// Delay sweep over a shared ensemble (common randomness across D).
/// Writes per-D subdirectories plus the combined sweep.csv with one row
/// per (D, statistic) and the cross-run decay/stabilization/uniformity
/// diagnostics.
RunManifest run_sweep(const ExperimentConfig& config);

/// Tree-exact mini run (CI oracle): enumerates the depth-`depth` tree,
/// runs the induction with the exact engine and returns the closed-loop
/// residual report.
ResidualReport run_oracle(const std::string& problem_name, int depth, int delay_steps = 1);

} // namespace bsde
