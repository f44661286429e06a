#pragma once

#include "bsde/stochastic_basis.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace bsde {

/// Binary container "BSDE-ENS1": 9-byte magic, then little-endian header
/// fields T (f64), N, D, m, P, seed (u64 each), then P*(N+1)*m doubles in
/// row-major [path][node][coordinate] order. Ensembles store W values;
/// the same container carries scheme arrays with m reinterpreted as the
/// per-node component count.
struct EnsembleHeader {
    double horizon = 0.0;
    std::uint64_t steps = 0;
    std::uint64_t delay_steps = 0;
    std::uint64_t dims = 0;
    std::uint64_t paths = 0;
    std::uint64_t seed = 0;
};

void write_ensemble(const PathEnsemble& ensemble, const std::string& path);
PathEnsemble read_ensemble(const std::string& path);

/// Raw variant for scheme arrays: `nodes_per_path * dims` doubles per path.
void write_array_file(const std::string& path, const EnsembleHeader& header,
                      const std::vector<double>& values);
std::vector<double> read_array_file(const std::string& path, EnsembleHeader& header);

/// FNV-1a 64-bit digest, used for manifest checksums and determinism tests.
std::uint64_t fnv1a64(const void* data, std::size_t size);
std::uint64_t file_checksum(const std::string& path);

} // namespace bsde
