#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mtwn/corpus.hpp"
#include "mtwn/model.hpp"

namespace mtwn {

// Which inputs condition the sample model. kLinguisticPlusF0 appends the
// oracle log F0 track and V/UV flag to the linguistic features and disables
// the secondary head; kMtl enables the head on the shared conditioner.
enum class ConditionMode { kLinguisticOnly, kLinguisticPlusF0, kMtl };

std::string condition_mode_name(ConditionMode mode);        // "linguistic", "linguistic+f0", "mtl"
ConditionMode condition_mode_from_name(const std::string& name);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct BatchConfig {
    int window_samples = 0;  // 0 -> 2 * receptive field, rounded up to a frame multiple
    int batch_size = 2;
};

struct TrainConfig {
    AdamConfig optimizer;
    BatchConfig batch;
    long steps = 20000;
    std::uint64_t seed = 1;
    LossWeights loss_weights;
    long checkpoint_every = 1000;
    WaveNetConfig model = WaveNetConfig::desk_default();
    ConditionerConfig conditioner;  // input_dim is overwritten from the corpus + mode
};

std::string train_config_to_json(const TrainConfig& config);
// Unknown keys anywhere in the document are rejected by name.
TrainConfig train_config_from_json(const std::string& json_text);

// Zero-mean/unit-variance statistics for the secondary regression targets,
// computed over the training corpus. log F0 statistics use voiced frames
// only; the V/UV flag stays on its native {0,1} scale for the sigmoid head.
struct FeatureNormalization {
    Tensor cep_mean, cep_std;  // [n_cepstra]
    double logf0_mean = 0.0;
    double logf0_std = 1.0;

    static FeatureNormalization compute(const std::vector<Utterance>& utterances);
};

struct SecondaryTargets {
    Tensor cepstra;  // normalized, [n_cep x F]
    Tensor logf0;    // normalized over voiced frames, 0 elsewhere, [1 x F]
    Tensor vuv;      // {0,1}, [1 x F]
};

struct CompositeLoss {
    Tensor total;
    Tensor ce;
    Tensor cepstra;  // invalid outside MTL mode
    Tensor logf0;
    Tensor vuv;
};

// total = ce + w.cepstra*mse(cep) + w.logf0*mse(logf0 | voiced) + w.vuv*mse(vuv).
CompositeLoss composite_loss(const Tensor& logits, const std::vector<int>& target_bins,
                             const SecondaryPrediction& prediction,
                             const SecondaryTargets& targets, const Tensor& vuv_mask,
                             const LossWeights& weights);

// ---- batching ----

struct TrainingWindow {
    std::vector<std::uint8_t> target_bins;  // length W
    std::vector<std::uint8_t> input_bins;   // length W; sample preceding each position
    Tensor condition;                       // [D_cond x Fw], mode already applied
    SecondaryTargets targets;               // frame targets for the window
    Tensor vuv_mask;                        // [1 x Fw]
};

using TrainingBatch = std::vector<TrainingWindow>;

// Preprocessed corpus: mu-law bins, mode-dependent condition inputs and
// normalized targets, ready for window slicing.
class TrainingSet {
public:
    static TrainingSet build(std::vector<Utterance> utterances, ConditionMode mode,
                             int n_cepstra);

    const FeatureNormalization& normalization() const { return norm_; }
    int condition_dim() const { return condition_dim_; }
    int frame_shift() const { return frame_shift_; }
    std::size_t size() const { return utterances_.size(); }
    const Utterance& utterance(std::size_t i) const { return utterances_[i]; }

    // Batches are pure functions of (seed, step): prefetching and resume
    // cannot perturb the sequence.
    TrainingBatch make_batch(const BatchConfig& batch, std::uint64_t seed, long step) const;

private:
    std::vector<Utterance> utterances_;
    std::vector<std::vector<std::uint8_t>> bins_;
    std::vector<Tensor> condition_;  // [D_cond x F] per utterance
    std::vector<SecondaryTargets> targets_;
    FeatureNormalization norm_;
    std::vector<double> silence_cepstrum_norm_;  // pad frames' normalized target
    int condition_dim_ = 0;
    int frame_shift_ = 80;
    int n_cepstra_ = 25;
};

// ---- optimizer ----

class Adam {
public:
    Adam(ParamMap params, AdamConfig config);

    void step();  // applies accumulated gradients, then leaves them in place
    void zero_grad();
    long steps_taken() const { return t_; }

    const ParamMap& params() const { return params_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void restore_state(long t, std::vector<std::vector<double>> m,
                       std::vector<std::vector<double>> v);

private:
    ParamMap params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

// ---- trainer ----

// Everything the synthesis and evaluation stages need from a training run.
struct TrainedModel {
    ConditionMode mode = ConditionMode::kLinguisticOnly;
    WaveNet net;
    Conditioner conditioner;
    MTLHead head;  // meaningful only in MTL mode
    FeatureNormalization norm;
    int frame_shift = 80;
    int n_symbols = 8;

    ParamMap collect_params() const;
    // Condition input features for one utterance under this model's mode.
    Tensor condition_features(const Utterance& utterance) const;
};

struct LossRecord {
    long step = 0;
    double ce = 0.0;
    double cep = 0.0, f0 = 0.0, vuv = 0.0;  // populated in MTL mode
    double total = 0.0;
    double wall_ms = 0.0;
};

struct TrainOptions {
    TrainConfig config;
    ConditionMode mode = ConditionMode::kLinguisticOnly;
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume;
    std::string run_id = "run";
    int n_symbols = 8;
};

struct TrainResult {
    std::filesystem::path final_checkpoint;
    std::filesystem::path loss_log;
    std::vector<LossRecord> records;
};

// Teacher-forced Adam training with a bounded prefetch queue. Writes
// loss_log.jsonl and periodic checkpoints under out_dir; aborts with a
// NumericError naming the first non-finite parameter gradient if the loss
// leaves the finite range.
TrainResult train(std::vector<Utterance> corpus, const TrainOptions& options);

// ---- checkpoints ----

struct LoadedCheckpoint {
    TrainedModel model;
    TrainConfig config;
    long step = 0;
    std::string run_id;
    std::vector<std::vector<double>> adam_m, adam_v;  // aligned with collect_params()
    long adam_t = 0;
};

void checkpoint_save(const std::filesystem::path& path, const TrainedModel& model,
                     const TrainConfig& config, long step, const Adam* optimizer,
                     const std::string& run_id);
LoadedCheckpoint checkpoint_load(const std::filesystem::path& path);

}  // namespace mtwn
