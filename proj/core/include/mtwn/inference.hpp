#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtwn/codec.hpp"
#include "mtwn/model.hpp"
#include "mtwn/rng.hpp"

namespace mtwn {

struct SamplerConfig {
    enum class Mode { kSample, kArgmax };
    Mode mode = Mode::kSample;
    double temperature = 1.0;  // SAMPLE only
    std::uint64_t seed = 0;
};

// Per-layer ring buffers holding exactly the past activations each dilated
// convolution taps, so one generation step costs O(layers * channels^2 * K)
// regardless of how far the rollout has run.
class GenerationCache {
public:
    GenerationCache() = default;
    explicit GenerationCache(const WaveNet& net);

    void reset();

    // Computes the logits column for the current timestep from the previous
    // sample's one-hot column and the condition column, then advances.
    // Results match a full forward pass over the accumulated history within
    // 1e-6 absolute.
    std::span<const double> step(const WaveNet& net, std::span<const double> x_onehot,
                                 std::span<const double> c_t);

    long steps_taken() const { return t_; }

    // Total buffered activations: sum over blocks of
    // ((filter_width - 1) * dilation + 1) * residual_channels.
    std::size_t buffered_activations() const;

private:
    const WaveNet* model_ = nullptr;
    long t_ = 0;
    std::vector<std::vector<double>> ring_;  // per block: capacity x R, zero-filled
    std::vector<std::size_t> capacity_;
    std::vector<double> h_, next_h_, filter_pre_, gate_pre_, gated_;
    std::vector<double> skip_acc_, post_, logits_;
};

// Free-function form of the cached step.
std::span<const double> incremental_step(GenerationCache& cache, const WaveNet& net,
                                         std::span<const double> x_onehot,
                                         std::span<const double> c_t);

// ARGMAX picks the lowest-index maximal bin; SAMPLE draws from
// softmax(logits / temperature).
int sample_bin(std::span<const double> logits, const SamplerConfig& sampler, Rng& rng);

struct GenerateResult {
    WaveformBuffer waveform;
    std::vector<std::uint8_t> bins;  // per-step trace
};

// Autoregressive rollout over cond_samples ([D_enc x T]), seeded with the
// mu-law bin of silence (128). The secondary head plays no part here.
GenerateResult generate(const WaveNet& net, const Tensor& cond_samples,
                        const SamplerConfig& sampler, int sample_rate = kDefaultSampleRate);

}  // namespace mtwn
