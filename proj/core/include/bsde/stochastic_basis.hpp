#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace bsde {

/// Uniform grid on [0, T] with N steps and a designated delay window of
/// D steps. The effective delay is h = D * dt; blocks of D steps counted
/// down from T structure the backward induction (the earliest block may
/// be shorter when D does not divide N).
struct TimeGrid {
    double horizon = 1.0; // T
    int steps = 1;        // N
    int delay_steps = 1;  // D

    double dt() const { return horizon / steps; }
    double delay() const { return delay_steps * dt(); }

    /// node(N) == horizon exactly; intermediate nodes are k * dt.
    double node(int k) const { return k == steps ? horizon : k * dt(); }

    int nodes() const { return steps + 1; }

    /// Block boundary indices {N, N-D, N-2D, ..., 0}, descending,
    /// always terminated by 0.
    std::vector<int> block_boundaries() const;
};

TimeGrid build_grid(double horizon, int steps, int delay_steps);

/// Seeded collection of discretized Brownian paths. Path p is generated
/// from its own substream of the seed, so enlarging `paths` never changes
/// already-generated paths. Immutable after construction.
struct PathEnsemble {
    TimeGrid grid;
    int dims = 1;  // m, coordinates of W
    int paths = 0; // P
    std::uint64_t seed = 0;
    std::vector<double> values;     // [P][N+1][m], values[p][0][*] = 0
    std::vector<double> increments; // [P][N][m]
    bool tree_enumeration = false;  // set when built by enumerate_tree_paths

    double value(int p, int k, int j) const {
        return values[(static_cast<std::size_t>(p) * grid.nodes() + k) * dims + j];
    }
    double increment(int p, int k, int j) const {
        return increments[(static_cast<std::size_t>(p) * grid.steps + k) * dims + j];
    }
    std::span<const double> path_values(int p) const {
        return {values.data() + static_cast<std::size_t>(p) * grid.nodes() * dims,
                static_cast<std::size_t>(grid.nodes()) * dims};
    }
};

PathEnsemble sample_brownian(const TimeGrid& grid, int dims, int paths, std::uint64_t seed);

/// Exact finite probability model: a binary tree of depth `depth` whose
/// leaf paths move by +-sqrt(dt) with equal weight. Every expectation is
/// a finite sum over the 2^depth leaves, which makes the model an exact
/// conditional-expectation oracle for the rest of the library.
struct TreeModel {
    int depth = 1;
    double horizon = 1.0;

    double dt() const { return horizon / depth; }
    double step() const; // sqrt(dt)
    long leaves() const { return 1L << depth; }
    double leaf_weight() const { return 1.0 / static_cast<double>(leaves()); }

    /// Increment of leaf path `leaf` over step k (time order = bit order
    /// from the most significant of the `depth` bits).
    double increment(long leaf, int k) const;

    /// Value of leaf path `leaf` at node k (sum of the first k increments).
    double value(long leaf, int k) const;

    /// Index of the level-k node that leaf `leaf` passes through. Leaves
    /// sharing the first k increments share this index, and they occupy
    /// the contiguous range [node << (depth-k), (node+1) << (depth-k)).
    long node_of(long leaf, int k) const { return leaf >> (depth - k); }

    /// Exact expectation of a per-leaf functional g(leaf).
    template <class F>
    double expectation(F&& g) const {
        double acc = 0.0;
        for (long leaf = 0; leaf < leaves(); ++leaf) acc += g(leaf);
        return acc * leaf_weight();
    }
};

TreeModel build_tree(int depth, double horizon);

/// Enumerates all leaf paths of the tree as an equally-weighted ensemble
/// (m = 1, P = 2^depth, path index = leaf index). The grid delay defaults
/// to one step and can be overridden by the caller.
PathEnsemble enumerate_tree_paths(const TreeModel& tree, int delay_steps = 1);

} // namespace bsde
