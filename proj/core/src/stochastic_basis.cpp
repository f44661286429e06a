#include "bsde/stochastic_basis.hpp"

#include "bsde/errors.hpp"
#include "parallel.hpp"

#include <cmath>
#include <random>
#include <string>

namespace bsde {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Box-Muller over the path substream. Deterministic across platforms:
// no dependence on std::normal_distribution internals.
class GaussianStream {
public:
    explicit GaussianStream(std::uint64_t substream_seed) : engine_(substream_seed) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    double uniform01() {
        // 53-bit mantissa in [0, 1)
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace

std::vector<int> TimeGrid::block_boundaries() const {
    std::vector<int> out;
    for (int k = steps; k > 0; k -= delay_steps) out.push_back(k);
    out.push_back(0);
    return out;
}

TimeGrid build_grid(double horizon, int steps, int delay_steps) {
    if (!(horizon > 0.0)) throw ConfigError("horizon must be > 0, got " + std::to_string(horizon));
    if (steps < 1) throw ConfigError("steps must be >= 1, got " + std::to_string(steps));
    if (delay_steps < 1 || delay_steps > steps)
        throw ConfigError("delay_steps must lie in [1, steps], got " + std::to_string(delay_steps));
    return TimeGrid{horizon, steps, delay_steps};
}

PathEnsemble sample_brownian(const TimeGrid& grid, int dims, int paths, std::uint64_t seed) {
    if (dims < 1) throw ConfigError("dims must be >= 1, got " + std::to_string(dims));
    if (paths < 1) throw ConfigError("paths must be >= 1, got " + std::to_string(paths));

    PathEnsemble e;
    e.grid = grid;
    e.dims = dims;
    e.paths = paths;
    e.seed = seed;
    const int N = grid.steps;
    e.values.assign(static_cast<std::size_t>(paths) * grid.nodes() * dims, 0.0);
    e.increments.assign(static_cast<std::size_t>(paths) * N * dims, 0.0);

    const double sdt = std::sqrt(grid.dt());
    const std::uint64_t root = splitmix64(seed);

    auto fill_range = [&](int p_begin, int p_end) {
        for (int p = p_begin; p < p_end; ++p) {
            GaussianStream g(splitmix64(root ^ (0x632be59bd9b4e019ULL + static_cast<std::uint64_t>(p))));
            double* inc = e.increments.data() + static_cast<std::size_t>(p) * N * dims;
            double* val = e.values.data() + static_cast<std::size_t>(p) * grid.nodes() * dims;
            for (int k = 0; k < N; ++k) {
                for (int j = 0; j < dims; ++j) {
                    const double dw = sdt * g.next();
                    val[static_cast<std::size_t>(k + 1) * dims + j] =
                        val[static_cast<std::size_t>(k) * dims + j] + dw;
                }
            }
            // stored increments are the value differences, so the
            // telescoping identity holds bit-for-bit
            for (int k = 0; k < N; ++k)
                for (int j = 0; j < dims; ++j)
                    inc[static_cast<std::size_t>(k) * dims + j] =
                        val[static_cast<std::size_t>(k + 1) * dims + j] -
                        val[static_cast<std::size_t>(k) * dims + j];
        }
    };

    // Shard-parallel by path index; substreams make the result identical
    // for any shard layout.
    detail::parallel_for_ranges(paths, fill_range);
    return e;
}

double TreeModel::step() const { return std::sqrt(dt()); }

double TreeModel::increment(long leaf, int k) const {
    const int bit = depth - 1 - k;
    return ((leaf >> bit) & 1L) ? step() : -step();
}

double TreeModel::value(long leaf, int k) const {
    double w = 0.0;
    for (int s = 0; s < k; ++s) w += increment(leaf, s);
    return w;
}

TreeModel build_tree(int depth, double horizon) {
    if (depth < 1 || depth > 24)
        throw ConfigError("tree depth must lie in [1, 24], got " + std::to_string(depth));
    if (!(horizon > 0.0)) throw ConfigError("horizon must be > 0");
    return TreeModel{depth, horizon};
}

PathEnsemble enumerate_tree_paths(const TreeModel& tree, int delay_steps) {
    PathEnsemble e;
    e.grid = build_grid(tree.horizon, tree.depth, delay_steps);
    e.dims = 1;
    e.paths = static_cast<int>(tree.leaves());
    e.seed = 0;
    e.tree_enumeration = true;
    const int N = tree.depth;
    e.values.assign(static_cast<std::size_t>(e.paths) * (N + 1), 0.0);
    e.increments.assign(static_cast<std::size_t>(e.paths) * N, 0.0);
    for (long leaf = 0; leaf < tree.leaves(); ++leaf) {
        double w = 0.0;
        for (int k = 0; k < N; ++k) {
            const double dw = tree.increment(leaf, k);
            e.increments[static_cast<std::size_t>(leaf) * N + k] = dw;
            w += dw;
            e.values[static_cast<std::size_t>(leaf) * (N + 1) + k + 1] = w;
        }
    }
    return e;
}

} // namespace bsde
