#include "mtwn/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mtwn/container.hpp"
#include "mtwn/rng.hpp"

namespace mtwn {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kCrossfadeHalf = 40;          // 2.5 ms each side -> 5 ms overlap
constexpr double kDurationNormFrames = 100.0;
constexpr double kPeakTarget = 0.95;        // per-utterance peak normalization

// In-place iterative radix-2 FFT. Hand-rolled so the evaluation order, and
// therefore every corpus byte, is identical across runs and builds.
void fft_radix2(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double angle = -2.0 * kPi / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(angle), std::sin(angle));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

// Harmonic amplitude profile for voiced symbol v (stable across runs).
std::vector<double> harmonic_profile(int voiced_index) {
    const int n_harm = 3 + 2 * (voiced_index % 3);
    const double decay = 0.5 + 0.1 * (voiced_index % 4);
    std::vector<double> amps(static_cast<std::size_t>(n_harm));
    double total = 0.0;
    for (int h = 0; h < n_harm; ++h) {
        amps[static_cast<std::size_t>(h)] = std::pow(decay, h);
        total += amps[static_cast<std::size_t>(h)];
    }
    for (double& a : amps) a /= total;
    return amps;
}

// One-pole coloration per unvoiced symbol.
double noise_pole(int unvoiced_index) {
    constexpr double kPoles[3] = {0.9, 0.0, -0.8};
    return kPoles[unvoiced_index % 3];
}

// f0 levels for voiced symbols, geometrically spaced inside [f0_min, f0_max]
// with headroom for the per-segment jitter.
double voiced_base_f0(const CorpusSpec& spec, int voiced_index) {
    const int n = std::max(1, spec.n_voiced_symbols());
    const double ratio = spec.f0_max_hz / spec.f0_min_hz;
    const double expo = (voiced_index + 0.5) / static_cast<double>(n);
    return spec.f0_min_hz * std::pow(ratio, expo);
}

struct SegmentSpan {
    long start = 0;  // sample index of segment start
    long end = 0;    // one past the last sample
};

}  // namespace

int CorpusSpec::n_voiced_symbols() const {
    const int v = (n_symbols * 5 + 7) / 8;  // ceil(5/8 * n)
    return std::clamp(v, 1, n_symbols - 1);
}

void CorpusSpec::validate() const {
    if (n_symbols < 2) throw ArgumentError("corpus spec: n_symbols must be >= 2");
    if (n_utterances < 1) throw ArgumentError("corpus spec: n_utterances must be >= 1");
    if (min_frames < 4) throw ArgumentError("corpus spec: min_frames must be >= 4");
    if (max_frames < min_frames)
        throw ArgumentError("corpus spec: max_frames must be >= min_frames");
    if (sample_rate < 8000) throw ArgumentError("corpus spec: sample_rate must be >= 8000");
    if (f0_min_hz < 60.0 || f0_min_hz > 400.0)
        throw ArgumentError("corpus spec: f0_min_hz outside [60, 400]");
    if (f0_max_hz < 60.0 || f0_max_hz > 400.0)
        throw ArgumentError("corpus spec: f0_max_hz outside [60, 400]");
    if (f0_min_hz >= f0_max_hz) throw ArgumentError("corpus spec: f0_min_hz >= f0_max_hz");
    if (frame_shift < 1) throw ArgumentError("corpus spec: frame_shift must be >= 1");
    if (frame_length < frame_shift)
        throw ArgumentError("corpus spec: frame_length must be >= frame_shift");
    if (n_cepstra < 1) throw ArgumentError("corpus spec: n_cepstra must be >= 1");
}

Utterance generate_utterance(const CorpusSpec& spec, int index) {
    spec.validate();
    if (index < 0) throw ArgumentError("generate_utterance: index must be >= 0");
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));

    const int total_frames =
        spec.min_frames +
        static_cast<int>(rng.uniform_index(
            static_cast<std::uint64_t>(spec.max_frames - spec.min_frames + 1)));

    // Segment layout first, parameters second, so the voicing fixup below
    // cannot perturb the draw sequence.
    std::vector<SegmentSpec> segments;
    int remaining = total_frames;
    while (remaining > 0) {
        int dur = 8 + static_cast<int>(rng.uniform_index(17));  // 8..24 frames
        if (remaining - dur < 4) dur = remaining;
        SegmentSpec seg;
        seg.symbol_id = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(spec.n_symbols)));
        seg.duration_frames = dur;
        segments.push_back(seg);
        remaining -= dur;
    }
    const int n_voiced = spec.n_voiced_symbols();
    bool any_voiced = false;
    for (const auto& seg : segments) any_voiced = any_voiced || seg.symbol_id < n_voiced;
    if (!any_voiced) segments.front().symbol_id = 0;

    for (auto& seg : segments) {
        seg.voiced = seg.symbol_id < n_voiced;
        seg.amplitude = 0.35 + 0.45 * rng.uniform();
        if (seg.voiced) {
            const double base = voiced_base_f0(spec, seg.symbol_id);
            seg.f0_start_hz = base * (1.0 + rng.uniform(-0.06, 0.06));
            seg.f0_end_hz = base * (1.0 + rng.uniform(-0.06, 0.06));
        }
    }

    // Sample spans per segment.
    const long n_samples = static_cast<long>(total_frames) * spec.frame_shift;
    std::vector<SegmentSpan> spans(segments.size());
    long cursor = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        spans[s].start = cursor;
        cursor += static_cast<long>(segments[s].duration_frames) * spec.frame_shift;
        spans[s].end = cursor;
    }

    // Overlap-add synthesis with complementary sin^2/cos^2 ramps in the 5 ms
    // regions centered on interior boundaries.
    std::vector<double> wave(static_cast<std::size_t>(n_samples), 0.0);
    const double fs = static_cast<double>(spec.sample_rate);
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto& seg = segments[s];
        const long core_start = spans[s].start, core_end = spans[s].end;
        const long lo = std::max(0L, core_start - (s == 0 ? 0 : kCrossfadeHalf));
        const long hi = std::min(n_samples,
                                 core_end + (s + 1 == segments.size() ? 0 : kCrossfadeHalf));
        const long span_len = hi - lo;
        if (span_len <= 0) continue;

        std::vector<double> sig(static_cast<std::size_t>(span_len), 0.0);
        Rng seg_rng(mix_seed(mix_seed(spec.seed, static_cast<std::uint64_t>(index)),
                             1000 + static_cast<std::uint64_t>(s)));
        if (seg.voiced) {
            const std::vector<double> amps = harmonic_profile(seg.symbol_id);
            const double core_len = static_cast<double>(core_end - core_start);
            double phase = 0.0;
            for (long n = lo; n < hi; ++n) {
                const double pos =
                    std::clamp((static_cast<double>(n) - core_start) / core_len, 0.0, 1.0);
                const double f0 = seg.f0_start_hz + (seg.f0_end_hz - seg.f0_start_hz) * pos;
                phase += f0 / fs;
                double v = 0.0;
                for (std::size_t h = 0; h < amps.size(); ++h) {
                    const double hf = f0 * static_cast<double>(h + 1);
                    if (hf >= 0.45 * fs) break;
                    v += amps[h] * std::sin(2.0 * kPi * (h + 1) * phase);
                }
                sig[static_cast<std::size_t>(n - lo)] = seg.amplitude * v;
            }
        } else {
            const double pole = noise_pole(seg.symbol_id - n_voiced);
            double state = 0.0;
            double energy = 0.0;
            for (long n = lo; n < hi; ++n) {
                state = seg_rng.normal() + pole * state;
                sig[static_cast<std::size_t>(n - lo)] = state;
                energy += state * state;
            }
            const double rms = std::sqrt(energy / static_cast<double>(span_len));
            const double gain = rms > 0.0 ? seg.amplitude / (std::sqrt(2.0) * rms) : 0.0;
            for (double& v : sig) v *= gain;
        }

        for (long n = lo; n < hi; ++n) {
            double w = 1.0;
            if (s != 0 && n < core_start + kCrossfadeHalf) {
                const double u = static_cast<double>(n - (core_start - kCrossfadeHalf)) /
                                 (2.0 * kCrossfadeHalf);
                const double sv = std::sin(kPi / 2.0 * u);
                w = sv * sv;
            } else if (s + 1 != segments.size() && n >= core_end - kCrossfadeHalf) {
                const double u = static_cast<double>(n - (core_end - kCrossfadeHalf)) /
                                 (2.0 * kCrossfadeHalf);
                const double cv = std::cos(kPi / 2.0 * u);
                w = cv * cv;
            }
            wave[static_cast<std::size_t>(n)] += w * sig[static_cast<std::size_t>(n - lo)];
        }
    }

    // Edge ramps against clicks at the utterance boundaries.
    const long edge = std::min<long>(kCrossfadeHalf, n_samples / 2);
    for (long n = 0; n < edge; ++n) {
        const double u = static_cast<double>(n) / static_cast<double>(edge);
        const double sv = std::sin(kPi / 2.0 * u);
        wave[static_cast<std::size_t>(n)] *= sv * sv;
        wave[static_cast<std::size_t>(n_samples - 1 - n)] *= sv * sv;
    }

    double peak = 0.0;
    for (double v : wave) peak = std::max(peak, std::abs(v));
    if (peak > 0.0) {
        const double gain = kPeakTarget / peak;
        for (double& v : wave) v *= gain;
    }

    Utterance utt;
    utt.frame_shift = spec.frame_shift;
    utt.frame_length = spec.frame_length;
    utt.segments = segments;
    utt.waveform.sample_rate = spec.sample_rate;
    utt.waveform.samples = std::move(wave);

    // Oracle frame targets from the construction.
    const auto f_total = static_cast<std::size_t>(total_frames);
    utt.logf0 = Tensor::zeros({1, f_total});
    utt.vuv = Tensor::zeros({1, f_total});
    auto lf = utt.logf0.data();
    auto vf = utt.vuv.data();
    std::size_t frame = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto& seg = segments[s];
        for (int j = 0; j < seg.duration_frames; ++j, ++frame) {
            if (!seg.voiced) continue;
            const double center =
                static_cast<double>(frame) * spec.frame_shift + spec.frame_shift / 2.0;
            const double pos = std::clamp(
                (center - spans[s].start) / static_cast<double>(spans[s].end - spans[s].start),
                0.0, 1.0);
            const double f0 = seg.f0_start_hz + (seg.f0_end_hz - seg.f0_start_hz) * pos;
            lf[frame] = std::log(f0);
            vf[frame] = 1.0;
        }
    }

    utt.linguistic = build_linguistic_features(segments, spec.n_symbols);
    utt.cepstra = extract_cepstra(utt.waveform, spec.frame_shift, spec.frame_length,
                                  spec.n_cepstra);
    return utt;
}

Tensor extract_cepstra(const WaveformBuffer& waveform, int frame_shift, int frame_length,
                       int n_coeffs) {
    if (frame_shift < 1 || frame_length < frame_shift)
        throw ArgumentError("extract_cepstra: need frame_length >= frame_shift >= 1");
    const std::size_t n = waveform.samples.size();
    const std::size_t f_total =
        n == 0 ? 0 : (n + static_cast<std::size_t>(frame_shift) - 1) /
                         static_cast<std::size_t>(frame_shift);
    const std::size_t nfft = next_pow2(static_cast<std::size_t>(frame_length));
    const std::size_t n_spec = nfft / 2 + 1;
    if (static_cast<std::size_t>(n_coeffs) > n_spec)
        throw ArgumentError("extract_cepstra: n_coeffs exceeds spectrum size");

    std::vector<double> window(static_cast<std::size_t>(frame_length));
    for (int i = 0; i < frame_length; ++i)
        window[static_cast<std::size_t>(i)] =
            0.5 - 0.5 * std::cos(2.0 * kPi * i / (frame_length - 1));

    // Orthonormal DCT-II basis, n_coeffs x n_spec.
    std::vector<double> dct(static_cast<std::size_t>(n_coeffs) * n_spec);
    const double a0 = std::sqrt(1.0 / static_cast<double>(n_spec));
    const double ak = std::sqrt(2.0 / static_cast<double>(n_spec));
    for (int k = 0; k < n_coeffs; ++k)
        for (std::size_t i = 0; i < n_spec; ++i)
            dct[static_cast<std::size_t>(k) * n_spec + i] =
                (k == 0 ? a0 : ak) *
                std::cos(kPi * (2.0 * static_cast<double>(i) + 1.0) * k /
                         (2.0 * static_cast<double>(n_spec)));

    Tensor out = Tensor::zeros({static_cast<std::size_t>(n_coeffs), f_total});
    auto os = out.data();
    std::vector<std::complex<double>> buf(nfft);
    std::vector<double> logmag(n_spec);
    for (std::size_t f = 0; f < f_total; ++f) {
        const std::size_t start = f * static_cast<std::size_t>(frame_shift);
        for (std::size_t i = 0; i < nfft; ++i) {
            const std::size_t idx = start + i;
            const double s = (i < static_cast<std::size_t>(frame_length) && idx < n)
                                 ? waveform.samples[idx] * window[i]
                                 : 0.0;
            buf[i] = {s, 0.0};
        }
        fft_radix2(buf);
        for (std::size_t i = 0; i < n_spec; ++i) logmag[i] = std::log(std::abs(buf[i]) + 1e-8);
        for (int k = 0; k < n_coeffs; ++k) {
            double acc = 0.0;
            const double* row = dct.data() + static_cast<std::size_t>(k) * n_spec;
            for (std::size_t i = 0; i < n_spec; ++i) acc += row[i] * logmag[i];
            os[static_cast<std::size_t>(k) * f_total + f] = acc;
        }
    }
    return out;
}

Tensor build_linguistic_features(const std::vector<SegmentSpec>& segments, int n_symbols) {
    if (segments.empty()) throw ArgumentError("build_linguistic_features: no segments");
    std::size_t f_total = 0;
    for (const auto& seg : segments) {
        if (seg.duration_frames < 1)
            throw ArgumentError("build_linguistic_features: segment duration must be >= 1");
        if (seg.symbol_id < 0 || seg.symbol_id >= n_symbols)
            throw ArgumentError("build_linguistic_features: symbol_id out of range");
        f_total += static_cast<std::size_t>(seg.duration_frames);
    }
    const auto d_lin = static_cast<std::size_t>(n_symbols + 3);
    Tensor out = Tensor::zeros({d_lin, f_total});
    auto os = out.data();
    std::size_t frame = 0;
    for (const auto& seg : segments) {
        const auto dur = static_cast<double>(seg.duration_frames);
        for (int j = 0; j < seg.duration_frames; ++j, ++frame) {
            os[static_cast<std::size_t>(seg.symbol_id) * f_total + frame] = 1.0;
            os[static_cast<std::size_t>(n_symbols) * f_total + frame] = j / dur;
            os[static_cast<std::size_t>(n_symbols + 1) * f_total + frame] =
                dur / kDurationNormFrames;
            os[static_cast<std::size_t>(n_symbols + 2) * f_total + frame] =
                static_cast<double>(frame) / static_cast<double>(f_total);
        }
    }
    return out;
}

// ---- disk formats ----

namespace {

using nlohmann::json;

std::string utterance_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "utt_%04d", index);
    return buf;
}

void hash_file(Fnv1a& hash, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checksum: cannot open " + path.string());
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        hash.update(buf, static_cast<std::size_t>(in.gcount()));
    }
}

}  // namespace

void utterance_features_write(const std::filesystem::path& path, const Utterance& utterance,
                              int sample_rate, int n_symbols) {
    Container c;
    c.kind = "features";
    json meta;
    meta["id"] = utterance.id;
    meta["sample_rate"] = sample_rate;
    meta["frame_shift"] = utterance.frame_shift;
    meta["frame_length"] = utterance.frame_length;
    meta["n_symbols"] = n_symbols;
    c.meta_json = meta.dump();
    c.add("linguistic", utterance.linguistic);
    c.add("cepstra", utterance.cepstra);
    c.add("logf0", utterance.logf0);
    c.add("vuv", utterance.vuv);
    container_write(path, c);
}

Utterance utterance_load(const ManifestEntry& entry) {
    Utterance utt;
    utt.id = entry.id;
    utt.waveform = wav_read(entry.wav_path);
    Container c = container_read(entry.feature_path);
    if (c.kind != "features")
        throw FormatError("utterance_load: container kind '" + c.kind + "' is not 'features'");
    json meta = json::parse(c.meta_json);
    utt.frame_shift = meta.at("frame_shift").get<int>();
    utt.frame_length = meta.value("frame_length", 320);
    utt.linguistic = c.tensor("linguistic");
    utt.cepstra = c.tensor("cepstra");
    utt.logf0 = c.tensor("logf0");
    utt.vuv = c.tensor("vuv");
    const std::size_t f_total = utt.vuv.dim(1);
    if (utt.linguistic.dim(1) != f_total || utt.cepstra.dim(1) != f_total ||
        utt.logf0.dim(1) != f_total)
        throw FormatError("utterance_load: frame counts disagree in " +
                          entry.feature_path.string());
    return utt;
}

std::vector<ManifestEntry> manifest_read(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("manifest_read: cannot open " + manifest_path.string());
    const auto base = manifest_path.parent_path();
    std::vector<ManifestEntry> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError("manifest_read: invalid JSON at line " + std::to_string(line_no) +
                              ": " + e.what());
        }
        ManifestEntry entry;
        entry.id = j.at("id").get<std::string>();
        entry.wav_path = base / j.at("wav").get<std::string>();
        entry.feature_path = base / j.at("features").get<std::string>();
        entries.push_back(std::move(entry));
    }
    if (entries.empty()) throw FormatError("manifest_read: no entries in " +
                                           manifest_path.string());
    return entries;
}

void manifest_write(const std::filesystem::path& manifest_path,
                    const std::vector<ManifestEntry>& entries) {
    const auto base = manifest_path.parent_path();
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw IoError("manifest_write: cannot open " + manifest_path.string());
    for (const auto& entry : entries) {
        json j;
        j["id"] = entry.id;
        j["wav"] = std::filesystem::relative(entry.wav_path, base).generic_string();
        j["features"] = std::filesystem::relative(entry.feature_path, base).generic_string();
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("manifest_write: write failed for " + manifest_path.string());
}

std::uint64_t write_corpus(const CorpusSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir / "wav");
    std::filesystem::create_directories(out_dir / "feat");

    std::vector<ManifestEntry> entries;
    for (int i = 0; i < spec.n_utterances; ++i) {
        Utterance utt = generate_utterance(spec, i);
        utt.id = utterance_id(i);
        ManifestEntry entry;
        entry.id = utt.id;
        entry.wav_path = out_dir / "wav" / (utt.id + ".wav");
        entry.feature_path = out_dir / "feat" / (utt.id + ".mtwf");
        wav_write(entry.wav_path, utt.waveform);
        utterance_features_write(entry.feature_path, utt, spec.sample_rate, spec.n_symbols);
        entries.push_back(std::move(entry));
    }
    const auto manifest_path = out_dir / "manifest.jsonl";
    manifest_write(manifest_path, entries);

    std::ofstream spec_out(out_dir / "corpus_spec.json", std::ios::trunc);
    spec_out << corpus_spec_to_json(spec) << "\n";

    return corpus_checksum(manifest_path);
}

std::uint64_t corpus_checksum(const std::filesystem::path& manifest_path) {
    const auto entries = manifest_read(manifest_path);
    Fnv1a hash;
    for (const auto& entry : entries) {
        hash.update(entry.id.data(), entry.id.size());
        hash_file(hash, entry.wav_path);
        hash_file(hash, entry.feature_path);
    }
    return hash.digest();
}

std::string corpus_spec_to_json(const CorpusSpec& spec) {
    json j;
    j["n_symbols"] = spec.n_symbols;
    j["n_utterances"] = spec.n_utterances;
    j["min_frames"] = spec.min_frames;
    j["max_frames"] = spec.max_frames;
    j["seed"] = spec.seed;
    j["sample_rate"] = spec.sample_rate;
    j["f0_min_hz"] = spec.f0_min_hz;
    j["f0_max_hz"] = spec.f0_max_hz;
    j["frame_shift"] = spec.frame_shift;
    j["frame_length"] = spec.frame_length;
    j["n_cepstra"] = spec.n_cepstra;
    return j.dump(2);
}

CorpusSpec corpus_spec_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("corpus spec: invalid JSON: ") + e.what());
    }
    for (const auto& [key, value] : j.items()) {
        (void)value;
        static const char* known[] = {"n_symbols",  "n_utterances", "min_frames",
                                      "max_frames", "seed",         "sample_rate",
                                      "f0_min_hz",  "f0_max_hz",    "frame_shift",
                                      "frame_length", "n_cepstra"};
        bool ok = false;
        for (const char* k : known)
            if (key == k) ok = true;
        if (!ok) throw FormatError("corpus spec: unknown key '" + key + "'");
    }
    CorpusSpec spec;
    if (j.contains("n_symbols")) spec.n_symbols = j["n_symbols"].get<int>();
    if (j.contains("n_utterances")) spec.n_utterances = j["n_utterances"].get<int>();
    if (j.contains("min_frames")) spec.min_frames = j["min_frames"].get<int>();
    if (j.contains("max_frames")) spec.max_frames = j["max_frames"].get<int>();
    if (j.contains("seed")) spec.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("sample_rate")) spec.sample_rate = j["sample_rate"].get<int>();
    if (j.contains("f0_min_hz")) spec.f0_min_hz = j["f0_min_hz"].get<double>();
    if (j.contains("f0_max_hz")) spec.f0_max_hz = j["f0_max_hz"].get<double>();
    if (j.contains("frame_shift")) spec.frame_shift = j["frame_shift"].get<int>();
    if (j.contains("frame_length")) spec.frame_length = j["frame_length"].get<int>();
    if (j.contains("n_cepstra")) spec.n_cepstra = j["n_cepstra"].get<int>();
    spec.validate();
    return spec;
}

}  // namespace mtwn
