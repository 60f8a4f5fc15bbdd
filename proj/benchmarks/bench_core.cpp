#include <benchmark/benchmark.h>

#include "mtwn/codec.hpp"
#include "mtwn/inference.hpp"
#include "mtwn/metrics.hpp"
#include "mtwn/model.hpp"
#include "mtwn/rng.hpp"

namespace {

mtwn::Tensor random_tensor(mtwn::Shape shape, mtwn::Rng& rng) {
    mtwn::Tensor t = mtwn::Tensor::zeros(std::move(shape));
    for (double& v : t.data()) v = rng.normal();
    return t;
}

void BM_Conv1dCausal(benchmark::State& state) {
    mtwn::Rng rng(7);
    const auto c = static_cast<std::size_t>(state.range(0));
    mtwn::Tensor x = random_tensor({c, 512}, rng);
    mtwn::Tensor w = random_tensor({c, c, 2}, rng);
    mtwn::Tensor b = mtwn::Tensor::zeros({c});
    mtwn::NoGradGuard ng;
    for (auto _ : state) {
        benchmark::DoNotOptimize(mtwn::conv1d_causal(x, w, b, 4));
    }
    state.SetItemsProcessed(state.iterations() * 512);
}
BENCHMARK(BM_Conv1dCausal)->Arg(16)->Arg(32)->Arg(64);

void BM_FoPool(benchmark::State& state) {
    mtwn::Rng rng(7);
    mtwn::Tensor hh = random_tensor({64, 256}, rng);
    mtwn::Tensor o = random_tensor({64, 256}, rng);
    mtwn::Tensor f = mtwn::Tensor::full({64, 256}, 0.5);
    mtwn::Tensor h0 = mtwn::Tensor::zeros({64});
    mtwn::NoGradGuard ng;
    for (auto _ : state) {
        benchmark::DoNotOptimize(mtwn::fo_pool(hh, o, f, h0));
    }
}
BENCHMARK(BM_FoPool);

void BM_IncrementalStep(benchmark::State& state) {
    mtwn::WaveNetConfig config = mtwn::WaveNetConfig::desk_default();
    config.condition_dim = 64;
    mtwn::Rng rng(7);
    mtwn::WaveNet net = mtwn::WaveNet::init(config, rng);
    mtwn::GenerationCache cache(net);
    std::vector<double> x(256, 0.0);
    x[128] = 1.0;
    std::vector<double> c(64);
    for (double& v : c) v = rng.normal();
    for (auto _ : state) {
        benchmark::DoNotOptimize(cache.step(net, x, c));
    }
    state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_IncrementalStep);

void BM_MulawEncode(benchmark::State& state) {
    mtwn::Rng rng(7);
    std::vector<double> xs(4096);
    for (double& v : xs) v = rng.uniform(-1.0, 1.0);
    for (auto _ : state) {
        int acc = 0;
        for (double v : xs) acc += mtwn::mulaw_encode(v);
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(state.iterations() * 4096);
}
BENCHMARK(BM_MulawEncode);

void BM_EstimateF0(benchmark::State& state) {
    mtwn::WaveformBuffer wave;
    wave.samples.resize(16000);
    for (std::size_t i = 0; i < wave.samples.size(); ++i)
        wave.samples[i] = 0.8 * std::sin(2.0 * 3.14159265358979 * 200.0 * i / 16000.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(mtwn::estimate_f0(wave, 80, 640));
    }
}
BENCHMARK(BM_EstimateF0);

}  // namespace

BENCHMARK_MAIN();
