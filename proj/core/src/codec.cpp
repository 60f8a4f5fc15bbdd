#include "mtwn/codec.hpp"

#include <cmath>

namespace mtwn {

namespace {
const double kLog256 = std::log(256.0);
}

int mulaw_encode(double x) {
    if (std::isnan(x)) throw NumericError("mulaw_encode: NaN input");
    x = std::clamp(x, -1.0, 1.0);
    const double mag = std::log1p(255.0 * std::abs(x)) / kLog256;
    const double f = x < 0.0 ? -mag : mag;
    const double v = (f + 1.0) / 2.0 * 255.0;
    // v >= 0, so round-half-away-from-zero is floor(v + 0.5).
    const int bin = static_cast<int>(std::floor(v + 0.5));
    return std::clamp(bin, 0, 255);
}

double mulaw_decode(int bin) {
    if (bin < 0 || bin > 255) throw IndexError("mulaw_decode: bin out of range [0, 255]");
    const double y = 2.0 * bin / 255.0 - 1.0;
    const double mag = (std::pow(256.0, std::abs(y)) - 1.0) / 255.0;
    return y < 0.0 ? -mag : mag;
}

QuantizedWaveform mulaw_encode(const WaveformBuffer& wave) {
    QuantizedWaveform q;
    q.sample_rate = wave.sample_rate;
    q.bins.reserve(wave.samples.size());
    for (double s : wave.samples) q.bins.push_back(static_cast<std::uint8_t>(mulaw_encode(s)));
    return q;
}

WaveformBuffer mulaw_decode(const QuantizedWaveform& quantized) {
    WaveformBuffer w;
    w.sample_rate = quantized.sample_rate;
    w.samples.reserve(quantized.bins.size());
    for (std::uint8_t b : quantized.bins) w.samples.push_back(mulaw_decode(b));
    return w;
}

Tensor one_hot(const QuantizedWaveform& quantized) {
    const std::size_t t_len = quantized.bins.size();
    Tensor out = Tensor::zeros({static_cast<std::size_t>(kQuantizationLevels), t_len});
    auto os = out.data();
    for (std::size_t t = 0; t < t_len; ++t) os[quantized.bins[t] * t_len + t] = 1.0;
    return out;
}

}  // namespace mtwn
