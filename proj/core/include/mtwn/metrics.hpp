#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mtwn/codec.hpp"
#include "mtwn/corpus.hpp"

namespace mtwn {

struct F0Track {
    std::vector<double> f0_hz;  // 0 where unvoiced
    std::vector<int> vuv;       // {0, 1}

    std::size_t frames() const { return vuv.size(); }
};

// Normalized autocorrelation pitch tracker: peak search in the lag band for
// [f0_min, f0_max] Hz with parabolic interpolation; a frame is voiced when
// the peak exceeds 0.3. Frames are centered on f*frame_shift + frame_shift/2.
F0Track estimate_f0(const WaveformBuffer& waveform, int frame_shift, int frame_length,
                    double f0_min_hz = 60.0, double f0_max_hz = 400.0);

struct F0Stats {
    bool defined = false;  // needs >= 2 frames voiced in both tracks
    double rmse_hz = 0.0;
    double corr = 0.0;
    std::size_t n_common = 0;
};

// Over frames voiced in both tracks: RMSE on linear Hz and the Pearson
// correlation coefficient. Undefined (absent, never 0 or NaN) with fewer
// than two common voiced frames or a zero-variance track.
F0Stats f0_rmse_and_corr(const F0Track& a, const F0Track& b);

// Percentage of frames whose voicing flags differ.
double vuv_error_percent(const F0Track& a, const F0Track& b);

// Mean over frames of (10*sqrt(2)/ln 10) * sqrt(sum_{k>=1} (a_k - b_k)^2);
// coefficient 0 (energy) is excluded.
double mcd_db(const Tensor& a, const Tensor& b);

struct SystemEval {
    std::string system;
    double mcd_db = 0.0;
    std::optional<double> f0_rmse_hz;
    std::optional<double> f0_corr;
    double vuv_err_pct = 0.0;
    std::size_t n_frames_compared = 0;
    std::vector<std::string> excluded;  // utterance ids skipped, with reasons
};

// Re-extracts cepstra and F0 from both the generated and the reference
// audio (so a system reproducing the reference bytes scores an exact zero
// row) and aggregates the four measures frame-weighted over the set.
// Missing or length-mismatched files exclude the utterance and are flagged.
SystemEval evaluate_system(const std::string& system_name,
                           const std::vector<ManifestEntry>& reference,
                           const std::filesystem::path& generated_dir, int jobs = 1);

// Human-readable table, one row per system, in the column order
// MCD / F0 RMSE / F0 Corr. / V-UV.
std::string eval_report_table(const std::vector<SystemEval>& rows);

// Line-delimited structured form of the same report.
void eval_report_write(const std::filesystem::path& path, const std::vector<SystemEval>& rows);

}  // namespace mtwn
