#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtwn/codec.hpp"
#include "mtwn/tensor.hpp"

namespace mtwn {

// One synthetic "phone": a fixed timbre (harmonic profile or noise color
// keyed by symbol_id) held for duration_frames, with a linear f0 glide when
// voiced.
struct SegmentSpec {
    int symbol_id = 0;
    int duration_frames = 1;
    bool voiced = false;
    double f0_start_hz = 0.0;
    double f0_end_hz = 0.0;
    double amplitude = 0.5;
};

struct Utterance {
    std::string id;
    WaveformBuffer waveform;
    Tensor linguistic;  // [D_lin x F]
    Tensor cepstra;     // [n_cepstra x F]
    Tensor logf0;       // [1 x F], natural log of Hz, 0 at unvoiced frames
    Tensor vuv;         // [1 x F] of {0, 1}
    int frame_shift = 80;
    int frame_length = 320;  // analysis window the cepstra came from
    std::vector<SegmentSpec> segments;

    std::size_t frames() const { return vuv.valid() ? vuv.dim(1) : 0; }
};

struct CorpusSpec {
    int n_symbols = 8;
    int n_utterances = 60;
    int min_frames = 60;
    int max_frames = 120;
    std::uint64_t seed = 1;
    int sample_rate = 16000;
    double f0_min_hz = 100.0;
    double f0_max_hz = 300.0;
    int frame_shift = 80;    // 5 ms at 16 kHz
    int frame_length = 320;  // 20 ms analysis window
    int n_cepstra = 25;

    int linguistic_dim() const { return n_symbols + 3; }
    // Low symbol ids are voiced timbres, high ids are noise colors
    // (5 voiced / 3 unvoiced at the default inventory of 8).
    int n_voiced_symbols() const;
    void validate() const;
};

// Deterministic in (spec, index): the same pair always yields bit-identical
// waveform bytes and targets.
Utterance generate_utterance(const CorpusSpec& spec, int index);

// Per frame: Hann window -> magnitude FFT -> log(|X| + 1e-8) -> orthonormal
// DCT-II, keeping the first n_coeffs coefficients. Final frames are
// zero-padded when the window overruns the waveform.
Tensor extract_cepstra(const WaveformBuffer& waveform, int frame_shift, int frame_length,
                       int n_coeffs);

// Per frame: one-hot symbol id, then fractional position within the segment
// [0,1), segment duration normalized by a fixed scale, and fractional
// position within the utterance. The voiced flag is deliberately absent;
// voicing must be learned. D_lin = n_symbols + 3.
Tensor build_linguistic_features(const std::vector<SegmentSpec>& segments, int n_symbols);

// ---- corpus on disk ----

struct ManifestEntry {
    std::string id;
    std::filesystem::path wav_path;      // absolute, resolved against the manifest
    std::filesystem::path feature_path;  // absolute
};

// Writes WAVs, feature containers, manifest.jsonl and corpus_spec.json under
// out_dir; returns the corpus checksum (FNV-1a over all artifact bytes in
// manifest order).
std::uint64_t write_corpus(const CorpusSpec& spec, const std::filesystem::path& out_dir);

std::vector<ManifestEntry> manifest_read(const std::filesystem::path& manifest_path);
void manifest_write(const std::filesystem::path& manifest_path,
                    const std::vector<ManifestEntry>& entries);

void utterance_features_write(const std::filesystem::path& path, const Utterance& utterance,
                              int sample_rate, int n_symbols);
// Loads waveform + targets for one manifest entry.
Utterance utterance_load(const ManifestEntry& entry);

// Recomputes the corpus checksum from the files a manifest references.
std::uint64_t corpus_checksum(const std::filesystem::path& manifest_path);

std::string corpus_spec_to_json(const CorpusSpec& spec);
CorpusSpec corpus_spec_from_json(const std::string& json_text);

}  // namespace mtwn
