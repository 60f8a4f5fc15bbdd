#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mtwn/tensor.hpp"

namespace mtwn {

inline constexpr int kQuantizationLevels = 256;
inline constexpr int kDefaultSampleRate = 16000;

// Mono waveform, samples in [-1, 1].
struct WaveformBuffer {
    std::vector<double> samples;
    int sample_rate = kDefaultSampleRate;
};

// mu-law companded waveform, one symbol in [0, 255] per sample.
struct QuantizedWaveform {
    std::vector<std::uint8_t> bins;
    int sample_rate = kDefaultSampleRate;
};

// Continuous mu-law companding with mu = 255. Inputs outside [-1, 1] are
// clamped first; the bin mapping rounds half away from zero, so
// mulaw_encode(0) == 128.
int mulaw_encode(double x);
double mulaw_decode(int bin);

QuantizedWaveform mulaw_encode(const WaveformBuffer& wave);
WaveformBuffer mulaw_decode(const QuantizedWaveform& quantized);

// One-hot expansion to a [256 x T] tensor: column t is 1 at row bins[t].
Tensor one_hot(const QuantizedWaveform& quantized);

// RIFF/WAVE PCM16 mono, little-endian. Reads scale samples by 1/32768;
// writes store round(x * 32767) clamped to the int16 range.
WaveformBuffer wav_read(const std::filesystem::path& path);
void wav_write(const std::filesystem::path& path, const WaveformBuffer& wave);

}  // namespace mtwn
