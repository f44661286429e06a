#include "bsde/condexp.hpp"
#include "bsde/scheme.hpp"

#include <benchmark/benchmark.h>

#include <random>

namespace {

using namespace bsde;

EngineConfig poly3_engine() {
    EngineConfig e;
    e.kind = EngineConfig::Kind::regression;
    e.basis = "poly3";
    e.ridge = 1e-8;
    return e;
}

void BM_SampleBrownian(benchmark::State& state) {
    const int paths = static_cast<int>(state.range(0));
    const TimeGrid grid = build_grid(1.0, 64, 1);
    for (auto _ : state) {
        PathEnsemble e = sample_brownian(grid, 1, paths, 42);
        benchmark::DoNotOptimize(e.values.data());
    }
    state.SetItemsProcessed(state.iterations() * paths * 64);
}
BENCHMARK(BM_SampleBrownian)->RangeMultiplier(4)->Range(1 << 10, 1 << 16);

void BM_FitCondexp(benchmark::State& state) {
    const int paths = static_cast<int>(state.range(0));
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> states(static_cast<std::size_t>(paths));
    std::vector<double> targets(states.size());
    for (int p = 0; p < paths; ++p) {
        states[static_cast<std::size_t>(p)] = n(rng);
        targets[static_cast<std::size_t>(p)] = std::sin(states[static_cast<std::size_t>(p)]) + n(rng);
    }
    const RegressionBasis basis = make_basis("poly3", 1e-8);
    for (auto _ : state) {
        CondExpEstimate est = fit_condexp(states, 1, targets, 1, basis);
        benchmark::DoNotOptimize(est.fitted.data());
    }
    state.SetItemsProcessed(state.iterations() * paths);
}
BENCHMARK(BM_FitCondexp)->RangeMultiplier(4)->Range(1 << 10, 1 << 16);

void BM_RunSchemeP4(benchmark::State& state) {
    const int paths = static_cast<int>(state.range(0));
    const TimeGrid grid = build_grid(1.0, 64, 4);
    const PathEnsemble e = sample_brownian(grid, 1, paths, 42);
    const ProblemSpec& p4 = find_problem("P4");
    for (auto _ : state) {
        SchemeOutput out = run_scheme(p4, e, 4, poly3_engine());
        benchmark::DoNotOptimize(out.Y.data());
    }
    state.SetItemsProcessed(state.iterations() * paths * 64);
}
BENCHMARK(BM_RunSchemeP4)->RangeMultiplier(4)->Range(1 << 10, 1 << 14)->Unit(benchmark::kMillisecond);

void BM_TreeOracleScheme(benchmark::State& state) {
    const int depth = static_cast<int>(state.range(0));
    const PathEnsemble tree = enumerate_tree_paths(build_tree(depth, 1.0));
    const ProblemSpec& p4 = find_problem("P4");
    EngineConfig engine;
    engine.kind = EngineConfig::Kind::tree_exact;
    for (auto _ : state) {
        SchemeOutput out = run_scheme(p4, tree, 1, engine);
        benchmark::DoNotOptimize(out.Y.data());
    }
}
BENCHMARK(BM_TreeOracleScheme)->DenseRange(6, 12, 2)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
