#include "mtwn/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mtwn {

namespace {

// Must match the sigmoid in the tensor ops so cached and full passes agree.
double stable_sigmoid(double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

GenerationCache::GenerationCache(const WaveNet& net) : model_(&net) {
    const auto r = static_cast<std::size_t>(net.config.residual_channels);
    const auto g = static_cast<std::size_t>(net.config.gate_channels);
    const auto s = static_cast<std::size_t>(net.config.skip_channels);
    const auto k = static_cast<std::size_t>(net.config.filter_width);
    ring_.reserve(net.blocks.size());
    capacity_.reserve(net.blocks.size());
    for (const auto& block : net.blocks) {
        const std::size_t cap = (k - 1) * static_cast<std::size_t>(block.dilation) + 1;
        capacity_.push_back(cap);
        ring_.emplace_back(cap * r, 0.0);
    }
    h_.resize(r);
    next_h_.resize(r);
    filter_pre_.resize(g);
    gate_pre_.resize(g);
    gated_.resize(g);
    skip_acc_.resize(s);
    post_.resize(s);
    logits_.resize(static_cast<std::size_t>(net.config.quantization_levels));
}

void GenerationCache::reset() {
    if (!model_) throw UsageError("GenerationCache: not initialized for a model");
    for (auto& ring : ring_) std::fill(ring.begin(), ring.end(), 0.0);
    t_ = 0;
}

std::size_t GenerationCache::buffered_activations() const {
    std::size_t total = 0;
    for (const auto& ring : ring_) total += ring.size();
    return total;
}

std::span<const double> GenerationCache::step(const WaveNet& net,
                                              std::span<const double> x_onehot,
                                              std::span<const double> c_t) {
    if (!model_) throw UsageError("GenerationCache: not initialized for a model");
    if (model_ != &net) throw UsageError("GenerationCache: cache belongs to a different model");
    const auto& cfg = net.config;
    const std::size_t q = static_cast<std::size_t>(cfg.quantization_levels);
    const std::size_t r = static_cast<std::size_t>(cfg.residual_channels);
    const std::size_t g = static_cast<std::size_t>(cfg.gate_channels);
    const std::size_t s = static_cast<std::size_t>(cfg.skip_channels);
    const std::size_t k_w = static_cast<std::size_t>(cfg.filter_width);
    const std::size_t d_enc = static_cast<std::size_t>(cfg.condition_dim);
    if (x_onehot.size() != q) throw DimensionError("incremental_step: input column size != 256");
    if (c_t.size() != d_enc)
        throw DimensionError("incremental_step: condition column size != condition_dim");

    // Input embedding (1x1 over the one-hot column).
    {
        const auto w = net.input_w.data();
        const auto b = net.input_b.data();
        for (std::size_t o = 0; o < r; ++o) {
            double acc = b[o];
            const double* row = w.data() + o * q;
            for (std::size_t i = 0; i < q; ++i)
                if (row[i] != 0.0) acc += row[i] * x_onehot[i];
            h_[o] = acc;
        }
    }

    std::fill(skip_acc_.begin(), skip_acc_.end(), 0.0);
    const auto t_now = static_cast<std::size_t>(t_);
    for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
        const auto& block = net.blocks[bi];
        const std::size_t cap = capacity_[bi];
        const std::size_t d = static_cast<std::size_t>(block.dilation);
        auto& ring = ring_[bi];
        std::copy(h_.begin(), h_.end(), ring.begin() + (t_now % cap) * r);

        const auto wf = block.conv_filter_w.data();
        const auto wg = block.conv_gate_w.data();
        const auto bf = block.conv_filter_b.data();
        const auto bg = block.conv_gate_b.data();
        const auto vf = block.cond_filter_w.data();
        const auto vg = block.cond_gate_w.data();
        for (std::size_t o = 0; o < g; ++o) {
            double facc = bf[o];
            double gacc = bg[o];
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t k = 0; k < k_w; ++k) {
                    const std::size_t offset = (k_w - 1 - k) * d;
                    if (offset > t_now) continue;  // zero left-padding region
                    const double tap = ring[((t_now - offset) % cap) * r + i];
                    facc += wf[(o * r + i) * k_w + k] * tap;
                    gacc += wg[(o * r + i) * k_w + k] * tap;
                }
            }
            double fcond = 0.0, gcond = 0.0;
            const double* vfr = vf.data() + o * d_enc;
            const double* vgr = vg.data() + o * d_enc;
            for (std::size_t e = 0; e < d_enc; ++e) {
                if (vfr[e] != 0.0) fcond += vfr[e] * c_t[e];
                if (vgr[e] != 0.0) gcond += vgr[e] * c_t[e];
            }
            filter_pre_[o] = facc + fcond;
            gate_pre_[o] = gacc + gcond;
            gated_[o] = std::tanh(filter_pre_[o]) * stable_sigmoid(gate_pre_[o]);
        }

        const auto rw = block.res_w.data();
        const auto rb = block.res_b.data();
        for (std::size_t i = 0; i < r; ++i) {
            double acc = rb[i];
            const double* row = rw.data() + i * g;
            for (std::size_t o = 0; o < g; ++o)
                if (row[o] != 0.0) acc += row[o] * gated_[o];
            next_h_[i] = h_[i] + acc;
        }
        const auto sw = block.skip_w.data();
        const auto sb = block.skip_b.data();
        for (std::size_t si = 0; si < s; ++si) {
            double acc = sb[si];
            const double* row = sw.data() + si * g;
            for (std::size_t o = 0; o < g; ++o)
                if (row[o] != 0.0) acc += row[o] * gated_[o];
            skip_acc_[si] += acc;
        }
        std::swap(h_, next_h_);
    }

    const auto p1w = net.post1_w.data();
    const auto p1b = net.post1_b.data();
    for (std::size_t o = 0; o < s; ++o) {
        double acc = p1b[o];
        const double* row = p1w.data() + o * s;
        for (std::size_t i = 0; i < s; ++i) {
            const double v = skip_acc_[i] > 0.0 ? skip_acc_[i] : 0.0;
            if (row[i] != 0.0) acc += row[i] * v;
        }
        post_[o] = acc;
    }
    const auto p2w = net.post2_w.data();
    const auto p2b = net.post2_b.data();
    for (std::size_t o = 0; o < q; ++o) {
        double acc = p2b[o];
        const double* row = p2w.data() + o * s;
        for (std::size_t i = 0; i < s; ++i) {
            const double v = post_[i] > 0.0 ? post_[i] : 0.0;
            if (row[i] != 0.0) acc += row[i] * v;
        }
        logits_[o] = acc;
    }

    ++t_;
    return {logits_.data(), logits_.size()};
}

std::span<const double> incremental_step(GenerationCache& cache, const WaveNet& net,
                                         std::span<const double> x_onehot,
                                         std::span<const double> c_t) {
    return cache.step(net, x_onehot, c_t);
}

int sample_bin(std::span<const double> logits, const SamplerConfig& sampler, Rng& rng) {
    for (double l : logits)
        if (!std::isfinite(l)) throw NumericError("sample_bin: non-finite logit");
    if (sampler.mode == SamplerConfig::Mode::kArgmax) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = i;
        return static_cast<int>(best);
    }
    if (sampler.temperature <= 0.0)
        throw ArgumentError("sample_bin: temperature must be > 0");
    double m = -std::numeric_limits<double>::infinity();
    for (double l : logits) m = std::max(m, l);
    std::vector<double> cumulative(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        total += std::exp((logits[i] - m) / sampler.temperature);
        cumulative[i] = total;
    }
    const double target = rng.uniform() * total;
    for (std::size_t i = 0; i < cumulative.size(); ++i)
        if (cumulative[i] > target) return static_cast<int>(i);
    return static_cast<int>(logits.size()) - 1;
}

GenerateResult generate(const WaveNet& net, const Tensor& cond_samples,
                        const SamplerConfig& sampler, int sample_rate) {
    if (cond_samples.rank() != 2)
        throw DimensionError("generate: condition tensor must be [D_enc x T]");
    if (cond_samples.dim(0) != static_cast<std::size_t>(net.config.condition_dim))
        throw DimensionError("generate: condition rows != model condition_dim");
    const std::size_t t_total = cond_samples.dim(1);
    const std::size_t q = static_cast<std::size_t>(net.config.quantization_levels);
    const std::size_t d_enc = cond_samples.dim(0);

    GenerationCache cache(net);
    Rng rng(sampler.seed);
    const auto cs = cond_samples.data();

    GenerateResult result;
    result.waveform.sample_rate = sample_rate;
    result.bins.reserve(t_total);
    result.waveform.samples.reserve(t_total);

    std::vector<double> x(q, 0.0);
    std::vector<double> c(d_enc);
    int prev_bin = 128;
    for (std::size_t t = 0; t < t_total; ++t) {
        x[static_cast<std::size_t>(prev_bin)] = 1.0;
        for (std::size_t e = 0; e < d_enc; ++e) c[e] = cs[e * t_total + t];
        const auto logits = cache.step(net, x, c);
        x[static_cast<std::size_t>(prev_bin)] = 0.0;
        const int bin = sample_bin(logits, sampler, rng);
        result.bins.push_back(static_cast<std::uint8_t>(bin));
        result.waveform.samples.push_back(mulaw_decode(bin));
        prev_bin = bin;
    }
    return result;
}

}  // namespace mtwn
