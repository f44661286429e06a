#include "bsde/ensemble_io.hpp"

#include "bsde/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace bsde {

namespace {

constexpr char kMagic[9] = {'B', 'S', 'D', 'E', '-', 'E', 'N', 'S', '1'};

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

void put_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

double get_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

void write_header(std::ostream& os, const EnsembleHeader& h) {
    os.write(kMagic, sizeof kMagic);
    put_f64(os, h.horizon);
    put_u64(os, h.steps);
    put_u64(os, h.delay_steps);
    put_u64(os, h.dims);
    put_u64(os, h.paths);
    put_u64(os, h.seed);
}

EnsembleHeader read_header(std::istream& is, const std::string& path) {
    char magic[sizeof kMagic];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw IoError("not a BSDE-ENS1 file: " + path);
    EnsembleHeader h;
    h.horizon = get_f64(is);
    h.steps = get_u64(is);
    h.delay_steps = get_u64(is);
    h.dims = get_u64(is);
    h.paths = get_u64(is);
    h.seed = get_u64(is);
    if (!is) throw IoError("truncated header in " + path);
    return h;
}

} // namespace

void write_array_file(const std::string& path, const EnsembleHeader& header,
                      const std::vector<double>& values) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_header(os, header);
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!os) throw IoError("short write: " + path);
}

std::vector<double> read_array_file(const std::string& path, EnsembleHeader& header) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    header = read_header(is, path);
    const std::size_t count =
        header.paths * (header.steps + 1) * header.dims;
    std::vector<double> values(count);
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) throw IoError("truncated payload in " + path);
    return values;
}

void write_ensemble(const PathEnsemble& ensemble, const std::string& path) {
    EnsembleHeader h;
    h.horizon = ensemble.grid.horizon;
    h.steps = static_cast<std::uint64_t>(ensemble.grid.steps);
    h.delay_steps = static_cast<std::uint64_t>(ensemble.grid.delay_steps);
    h.dims = static_cast<std::uint64_t>(ensemble.dims);
    h.paths = static_cast<std::uint64_t>(ensemble.paths);
    h.seed = ensemble.seed;
    write_array_file(path, h, ensemble.values);
}

PathEnsemble read_ensemble(const std::string& path) {
    EnsembleHeader h;
    std::vector<double> values = read_array_file(path, h);
    PathEnsemble e;
    e.grid = build_grid(h.horizon, static_cast<int>(h.steps), static_cast<int>(h.delay_steps));
    e.dims = static_cast<int>(h.dims);
    e.paths = static_cast<int>(h.paths);
    e.seed = h.seed;
    e.values = std::move(values);
    // increments reconstructed from consecutive values
    const int N = e.grid.steps;
    e.increments.assign(static_cast<std::size_t>(e.paths) * N * e.dims, 0.0);
    for (int p = 0; p < e.paths; ++p)
        for (int k = 0; k < N; ++k)
            for (int j = 0; j < e.dims; ++j)
                e.increments[(static_cast<std::size_t>(p) * N + k) * e.dims + j] =
                    e.value(p, k + 1, j) - e.value(p, k, j);
    return e;
}

std::uint64_t fnv1a64(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t file_checksum(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof buf);
        const std::streamsize got = is.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

} // namespace bsde
