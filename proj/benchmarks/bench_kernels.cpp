#include <benchmark/benchmark.h>

#include <random>

#include "mdf/detector.hpp"
#include "mdf/moe.hpp"
#include "mdf/ops.hpp"
#include "mdf/stats.hpp"

using namespace mdf;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : t.data()) v = n(rng);
    return t;
}

void BM_Conv2dForward(benchmark::State& state) {
    const auto C = static_cast<std::size_t>(state.range(0));
    const auto S = static_cast<std::size_t>(state.range(1));
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor({4, C, S, S}, rng), w = random_tensor({C, C, 3, 3}, rng);
    for (auto _ : state) {
        Graph g;
        Var y = ops::conv2d(g, g.input("x", x), g.input("w", w), std::nullopt, 1, 1);
        benchmark::DoNotOptimize(g.value(y).data().data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(4 * C * C * S * S * 9));
}
BENCHMARK(BM_Conv2dForward)->Args({8, 32})->Args({16, 16})->Args({32, 8})->Unit(benchmark::kMicrosecond);

void BM_Conv2dBackward(benchmark::State& state) {
    const auto C = static_cast<std::size_t>(state.range(0));
    const auto S = static_cast<std::size_t>(state.range(1));
    std::mt19937_64 rng(2);
    const Tensor x = random_tensor({4, C, S, S}, rng), w = random_tensor({C, C, 3, 3}, rng);
    for (auto _ : state) {
        Graph g;
        Var wv = g.param("w", w);
        Var y = ops::reduce_sum(g, ops::conv2d(g, g.input("x", x), wv, std::nullopt, 1, 1));
        g.backward(y);
        benchmark::DoNotOptimize(g.grad(wv).data().data());
    }
}
BENCHMARK(BM_Conv2dBackward)->Args({8, 32})->Args({16, 16})->Unit(benchmark::kMicrosecond);

void BM_MoEForward(benchmark::State& state) {
    MoEConfig cfg;
    cfg.num_experts = static_cast<std::size_t>(state.range(0));
    cfg.top_k = static_cast<std::size_t>(state.range(1));
    cfg.in_channels = cfg.hidden_channels = cfg.out_channels = 24;
    std::mt19937_64 rng(3);
    ParamStore store;
    init_moe_params(store, cfg, rng);
    const Tensor x = random_tensor({8, 24, 8, 8}, rng);
    for (auto _ : state) {
        Graph g;
        Context ctx(g, store, false);
        Var y = moe_forward(ctx, g.input("x", x), cfg, nullptr, 0);
        benchmark::DoNotOptimize(g.value(y).data().data());
    }
}
BENCHMARK(BM_MoEForward)->Args({4, 1})->Args({4, 2})->Args({4, 4})->Args({8, 2})->Unit(benchmark::kMicrosecond);

void BM_DetectorTrainStep(benchmark::State& state) {
    ModelConfig mc;
    mc.variant = state.range(0) ? Variant::moe : Variant::baseline;
    SyntheticSpec spec;
    std::vector<LabeledImage> items;
    for (std::size_t i = 0; i < 16; ++i) items.push_back(synthesize_image(spec, "train", i));
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch = 16;
    for (auto _ : state) {
        Model m = build_model(mc, 0);
        benchmark::DoNotOptimize(train(m, items, items, tc, {.evaluate = [](Model&) { return SplitScore{}; }}).steps);
    }
}
BENCHMARK(BM_DetectorTrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_WilcoxonExact(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937_64 rng(4);
    std::normal_distribution<double> d(0.1, 1.0);
    std::vector<double> x(n), y(n, 0.0);
    for (auto& v : x) v = d(rng);
    for (auto _ : state) benchmark::DoNotOptimize(wilcoxon_signed_rank(x, y).p_value);
}
BENCHMARK(BM_WilcoxonExact)->Arg(10)->Arg(25)->Arg(50)->Unit(benchmark::kMicrosecond);

void BM_HolmAdjust(benchmark::State& state) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> p(static_cast<std::size_t>(state.range(0)));
    for (auto& v : p) v = u(rng);
    for (auto _ : state) benchmark::DoNotOptimize(holm_adjust(p).data());
}
BENCHMARK(BM_HolmAdjust)->Arg(5)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
