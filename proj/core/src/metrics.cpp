#include "mtwn/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace mtwn {

namespace {

constexpr double kVoicingThreshold = 0.3;
constexpr double kMcdConstant = 6.141851463713754;  // 10 * sqrt(2) / ln(10)

}  // namespace

F0Track estimate_f0(const WaveformBuffer& waveform, int frame_shift, int frame_length,
                    double f0_min_hz, double f0_max_hz) {
    if (frame_shift < 1 || frame_length < 2)
        throw ArgumentError("estimate_f0: bad framing parameters");
    if (f0_min_hz <= 0.0 || f0_max_hz <= f0_min_hz)
        throw ArgumentError("estimate_f0: bad f0 range");
    const double fs = static_cast<double>(waveform.sample_rate);
    const long n = static_cast<long>(waveform.samples.size());
    const std::size_t f_total =
        n == 0 ? 0 : static_cast<std::size_t>((n + frame_shift - 1) / frame_shift);

    const long lag_min = std::max(2L, static_cast<long>(std::floor(fs / f0_max_hz)));
    const long lag_max = static_cast<long>(std::ceil(fs / f0_min_hz));

    F0Track track;
    track.f0_hz.assign(f_total, 0.0);
    track.vuv.assign(f_total, 0);

    std::vector<double> corr(static_cast<std::size_t>(lag_max) + 2, 0.0);
    std::vector<double> frame(static_cast<std::size_t>(frame_length));
    for (std::size_t f = 0; f < f_total; ++f) {
        // Window centered on the frame.
        const long center = static_cast<long>(f) * frame_shift + frame_shift / 2;
        const long lo = center - frame_length / 2;
        long filled = 0;
        double energy = 0.0;
        for (long i = 0; i < frame_length; ++i) {
            const long idx = lo + i;
            const double v =
                (idx >= 0 && idx < n) ? waveform.samples[static_cast<std::size_t>(idx)] : 0.0;
            frame[static_cast<std::size_t>(i)] = v;
            energy += v * v;
            if (idx >= 0 && idx < n) ++filled;
        }
        if (filled < lag_min + 8 || energy < 1e-10) continue;  // degenerate -> unvoiced

        const long top_lag = std::min<long>(lag_max, frame_length - 8);
        double best_r = 0.0;
        for (long lag = lag_min; lag <= top_lag; ++lag) {
            const long count = frame_length - lag;
            double dot = 0.0, e0 = 0.0, e1 = 0.0;
            const double* a = frame.data();
            const double* b = frame.data() + lag;
            for (long i = 0; i < count; ++i) {
                dot += a[i] * b[i];
                e0 += a[i] * a[i];
                e1 += b[i] * b[i];
            }
            const double denom = std::sqrt(e0 * e1);
            const double r = denom > 1e-12 ? dot / denom : 0.0;
            corr[static_cast<std::size_t>(lag)] = r;
            best_r = std::max(best_r, r);
        }
        if (best_r <= kVoicingThreshold) continue;

        // Prefer the shortest lag near the peak so harmonic-rich frames do
        // not collapse an octave down.
        long best_lag = 0;
        for (long lag = lag_min; lag <= top_lag; ++lag) {
            if (corr[static_cast<std::size_t>(lag)] >= 0.97 * best_r) {
                best_lag = lag;
                break;
            }
        }
        double refined = static_cast<double>(best_lag);
        if (best_lag > lag_min && best_lag < top_lag) {
            const double rm = corr[static_cast<std::size_t>(best_lag - 1)];
            const double r0 = corr[static_cast<std::size_t>(best_lag)];
            const double rp = corr[static_cast<std::size_t>(best_lag + 1)];
            const double denom = rm - 2.0 * r0 + rp;
            if (std::abs(denom) > 1e-12) {
                const double delta = 0.5 * (rm - rp) / denom;
                if (std::abs(delta) <= 1.0) refined += delta;
            }
        }
        const double f0 = std::clamp(fs / refined, f0_min_hz, f0_max_hz);
        track.f0_hz[f] = f0;
        track.vuv[f] = 1;
    }
    return track;
}

F0Stats f0_rmse_and_corr(const F0Track& a, const F0Track& b) {
    if (a.frames() != b.frames())
        throw DimensionError("f0_rmse_and_corr: track lengths differ");
    F0Stats stats;
    double sq = 0.0, sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t f = 0; f < a.frames(); ++f) {
        if (a.vuv[f] == 0 || b.vuv[f] == 0) continue;
        const double x = a.f0_hz[f];
        const double y = b.f0_hz[f];
        const double d = x - y;
        sq += d * d;
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
        ++stats.n_common;
    }
    if (stats.n_common < 2) return stats;  // undefined, reported absent
    const double n = static_cast<double>(stats.n_common);
    const double var_a = saa - sa * sa / n;
    const double var_b = sbb - sb * sb / n;
    if (var_a <= 1e-12 || var_b <= 1e-12) return stats;  // constant track
    stats.defined = true;
    stats.rmse_hz = std::sqrt(sq / n);
    stats.corr = (sab - sa * sb / n) / std::sqrt(var_a * var_b);
    stats.corr = std::clamp(stats.corr, -1.0, 1.0);
    return stats;
}

double vuv_error_percent(const F0Track& a, const F0Track& b) {
    if (a.frames() != b.frames()) throw DimensionError("vuv_error: track lengths differ");
    if (a.frames() == 0) return 0.0;
    std::size_t wrong = 0;
    for (std::size_t f = 0; f < a.frames(); ++f)
        if (a.vuv[f] != b.vuv[f]) ++wrong;
    return 100.0 * static_cast<double>(wrong) / static_cast<double>(a.frames());
}

double mcd_db(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("mcd: cepstra shapes differ");
    const std::size_t n_cep = a.dim(0), f_total = a.dim(1);
    if (f_total == 0) return 0.0;
    const auto as = a.data();
    const auto bs = b.data();
    double acc = 0.0;
    for (std::size_t f = 0; f < f_total; ++f) {
        double sq = 0.0;
        for (std::size_t k = 1; k < n_cep; ++k) {  // c0 excluded
            const double d = as[k * f_total + f] - bs[k * f_total + f];
            sq += d * d;
        }
        acc += std::sqrt(sq);
    }
    return kMcdConstant * acc / static_cast<double>(f_total);
}

// ---- system evaluation ----

namespace {

struct UtteranceEval {
    bool ok = false;
    std::string error;
    double mcd_sum = 0.0;  // per-frame distances summed (before the constant)
    std::size_t frames = 0;
    std::size_t vuv_wrong = 0;
    std::vector<std::pair<double, double>> f0_pairs;  // (generated, reference)
};

UtteranceEval evaluate_utterance(const ManifestEntry& entry,
                                 const std::filesystem::path& generated_dir) {
    UtteranceEval ev;
    const auto gen_path = generated_dir / (entry.id + ".wav");
    if (!std::filesystem::exists(gen_path)) {
        ev.error = "missing " + gen_path.string();
        return ev;
    }
    Utterance ref = utterance_load(entry);
    WaveformBuffer gen = wav_read(gen_path);
    if (gen.samples.size() != ref.waveform.samples.size()) {
        ev.error = entry.id + ": generated length " + std::to_string(gen.samples.size()) +
                   " != reference length " + std::to_string(ref.waveform.samples.size());
        return ev;
    }

    const int shift = ref.frame_shift;
    Tensor gen_cep = extract_cepstra(gen, shift, ref.frame_length,
                                     static_cast<int>(ref.cepstra.dim(0)));
    // Both F0 tracks come from the same tracker so the comparison is
    // estimator-to-estimator, mirroring re-extraction on natural speech.
    const int f0_window = std::max(2 * ref.frame_length, 512);
    F0Track gen_f0 = estimate_f0(gen, shift, f0_window);
    F0Track ref_f0 = estimate_f0(ref.waveform, shift, f0_window);

    const std::size_t f_total = ref.frames();
    if (gen_cep.dim(1) != f_total || gen_f0.frames() != f_total) {
        ev.error = entry.id + ": frame count mismatch after re-extraction";
        return ev;
    }

    const auto as = gen_cep.data();
    const auto bs = ref.cepstra.data();
    const std::size_t n_cep = ref.cepstra.dim(0);
    for (std::size_t f = 0; f < f_total; ++f) {
        double sq = 0.0;
        for (std::size_t k = 1; k < n_cep; ++k) {
            const double d = as[k * f_total + f] - bs[k * f_total + f];
            sq += d * d;
        }
        ev.mcd_sum += std::sqrt(sq);
    }
    for (std::size_t f = 0; f < f_total; ++f) {
        if (gen_f0.vuv[f] != ref_f0.vuv[f]) ++ev.vuv_wrong;
        if (gen_f0.vuv[f] == 1 && ref_f0.vuv[f] == 1)
            ev.f0_pairs.emplace_back(gen_f0.f0_hz[f], ref_f0.f0_hz[f]);
    }
    ev.frames = f_total;
    ev.ok = true;
    return ev;
}

}  // namespace

SystemEval evaluate_system(const std::string& system_name,
                           const std::vector<ManifestEntry>& reference,
                           const std::filesystem::path& generated_dir, int jobs) {
    if (reference.empty()) throw ArgumentError("evaluate_system: empty reference set");
    if (jobs < 1) jobs = 1;

    std::vector<UtteranceEval> evals(reference.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= reference.size()) return;
            try {
                evals[i] = evaluate_utterance(reference[i], generated_dir);
            } catch (const std::exception& e) {
                evals[i].ok = false;
                evals[i].error = reference[i].id + ": " + e.what();
            }
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    SystemEval out;
    out.system = system_name;
    double mcd_sum = 0.0;
    std::size_t frames = 0, vuv_wrong = 0;
    std::vector<std::pair<double, double>> pairs;
    for (std::size_t i = 0; i < evals.size(); ++i) {
        if (!evals[i].ok) {
            out.excluded.push_back(evals[i].error.empty() ? reference[i].id : evals[i].error);
            continue;
        }
        mcd_sum += evals[i].mcd_sum;
        frames += evals[i].frames;
        vuv_wrong += evals[i].vuv_wrong;
        pairs.insert(pairs.end(), evals[i].f0_pairs.begin(), evals[i].f0_pairs.end());
    }
    if (frames == 0) {
        if (!out.excluded.empty()) return out;  // everything excluded; caller inspects
        throw ArgumentError("evaluate_system: no frames compared");
    }
    out.n_frames_compared = frames;
    out.mcd_db = kMcdConstant * mcd_sum / static_cast<double>(frames);
    out.vuv_err_pct = 100.0 * static_cast<double>(vuv_wrong) / static_cast<double>(frames);

    F0Track ga, gb;
    ga.f0_hz.reserve(pairs.size());
    gb.f0_hz.reserve(pairs.size());
    for (const auto& [x, y] : pairs) {
        ga.f0_hz.push_back(x);
        ga.vuv.push_back(1);
        gb.f0_hz.push_back(y);
        gb.vuv.push_back(1);
    }
    const F0Stats stats = f0_rmse_and_corr(ga, gb);
    if (stats.defined) {
        out.f0_rmse_hz = stats.rmse_hz;
        out.f0_corr = stats.corr;
    }
    return out;
}

std::string eval_report_table(const std::vector<SystemEval>& rows) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-18s %10s %14s %10s %10s %10s\n", "System", "MCD (dB)",
                  "F0 RMSE (Hz)", "F0 Corr.", "V/UV (%)", "frames");
    out << line;
    for (const auto& row : rows) {
        char rmse[32], corr[32];
        if (row.f0_rmse_hz)
            std::snprintf(rmse, sizeof(rmse), "%.3f", *row.f0_rmse_hz);
        else
            std::snprintf(rmse, sizeof(rmse), "--");
        if (row.f0_corr)
            std::snprintf(corr, sizeof(corr), "%.3f", *row.f0_corr);
        else
            std::snprintf(corr, sizeof(corr), "--");
        std::snprintf(line, sizeof(line), "%-18s %10.3f %14s %10s %10.3f %10zu\n",
                      row.system.c_str(), row.mcd_db, rmse, corr, row.vuv_err_pct,
                      row.n_frames_compared);
        out << line;
        for (const auto& ex : row.excluded) out << "  excluded: " << ex << "\n";
    }
    return out.str();
}

void eval_report_write(const std::filesystem::path& path, const std::vector<SystemEval>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("eval_report_write: cannot open " + path.string());
    for (const auto& row : rows) {
        nlohmann::json j;
        j["system"] = row.system;
        j["mcd_db"] = row.mcd_db;
        if (row.f0_rmse_hz)
            j["f0_rmse_hz"] = *row.f0_rmse_hz;
        else
            j["f0_rmse_hz"] = nullptr;
        if (row.f0_corr)
            j["f0_corr"] = *row.f0_corr;
        else
            j["f0_corr"] = nullptr;
        j["vuv_err_pct"] = row.vuv_err_pct;
        j["n_frames_compared"] = row.n_frames_compared;
        j["excluded"] = row.excluded;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("eval_report_write: write failed for " + path.string());
}

}  // namespace mtwn
