#include <benchmark/benchmark.h>

#include "tsteer/dataset.hpp"
#include "tsteer/geometry.hpp"
#include "tsteer/model.hpp"
#include "tsteer/transplant.hpp"

namespace {

using namespace tsteer;

const Parameters& default_params() {
    static const Parameters p = build(ModelConfig{}, 7);
    return p;
}

std::vector<double> context(bool calm, std::uint64_t seed) {
    const auto& c = default_params().config();
    return synthetic_context(1.0, calm, static_cast<std::size_t>(c.context_len + c.horizon), seed);
}

void BM_Forward(benchmark::State& state) {
    const auto& p = default_params();
    auto ctx = context(true, 1);
    ctx.resize(static_cast<std::size_t>(p.config().context_len));
    for (auto _ : state) benchmark::DoNotOptimize(forward(p, ctx));
}
BENCHMARK(BM_Forward);

void BM_ForwardResume(benchmark::State& state) {
    const auto& p = default_params();
    auto ctx = context(true, 2);
    ctx.resize(static_cast<std::size_t>(p.config().context_len));
    const int layer = static_cast<int>(state.range(0));
    const ForwardResult fr = forward(p, ctx);
    for (auto _ : state) benchmark::DoNotOptimize(forward_resume(p, fr.activations[static_cast<std::size_t>(layer - 1)], layer));
}
BENCHMARK(BM_ForwardResume)->Arg(1)->Arg(3)->Arg(6);

void BM_Intervene(benchmark::State& state) {
    const auto& p = default_params();
    const int t_in = p.config().context_len;
    auto target = context(true, 3);
    auto style = context(false, 4);
    target.resize(static_cast<std::size_t>(t_in));
    style.resize(static_cast<std::size_t>(t_in));
    const SemanticSignature sig = context_signature(p, style, 3);
    for (auto _ : state) benchmark::DoNotOptimize(intervene(p, target, sig, 3));
}
BENCHMARK(BM_Intervene);

void BM_Grad(benchmark::State& state) {
    const auto& p = default_params();
    const auto series = context(false, 5);
    const auto t_in = static_cast<std::ptrdiff_t>(p.config().context_len);
    const std::span<const double> ctx(series.data(), static_cast<std::size_t>(t_in));
    const std::span<const double> tgt(series.data() + t_in, series.size() - static_cast<std::size_t>(t_in));
    for (auto _ : state) benchmark::DoNotOptimize(grad(p, ctx, tgt));
}
BENCHMARK(BM_Grad);

void BM_PcaFit(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const Mat data = Mat::Random(n, 64);
    for (auto _ : state) benchmark::DoNotOptimize(pca_fit(data, 16));
}
BENCHMARK(BM_PcaFit)->Arg(128)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
