#include "mtwn/training.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "mtwn/container.hpp"

namespace mtwn {

using nlohmann::json;

std::string condition_mode_name(ConditionMode mode) {
    switch (mode) {
        case ConditionMode::kLinguisticOnly: return "linguistic";
        case ConditionMode::kLinguisticPlusF0: return "linguistic+f0";
        case ConditionMode::kMtl: return "mtl";
    }
    throw ArgumentError("condition_mode_name: bad mode value");
}

ConditionMode condition_mode_from_name(const std::string& name) {
    if (name == "linguistic") return ConditionMode::kLinguisticOnly;
    if (name == "linguistic+f0") return ConditionMode::kLinguisticPlusF0;
    if (name == "mtl") return ConditionMode::kMtl;
    throw ArgumentError("unknown condition mode '" + name +
                        "' (expected linguistic, linguistic+f0 or mtl)");
}

// ---- config JSON ----

std::string train_config_to_json(const TrainConfig& c) {
    json j;
    j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"epsilon", c.optimizer.epsilon}};
    j["batch"] = {{"window_samples", c.batch.window_samples},
                  {"batch_size", c.batch.batch_size}};
    j["steps"] = c.steps;
    j["seed"] = c.seed;
    j["loss_weights"] = {{"cepstra", c.loss_weights.cepstra},
                         {"logf0", c.loss_weights.logf0},
                         {"vuv", c.loss_weights.vuv}};
    j["checkpoint_every"] = c.checkpoint_every;
    j["model"] = json::parse(wavenet_config_to_json(c.model));
    j["conditioner"] = json::parse(conditioner_config_to_json(c.conditioner));
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("train config: invalid JSON: ") + e.what());
    }
    static const char* known[] = {"optimizer", "batch",            "steps", "seed",
                                  "loss_weights", "checkpoint_every", "model", "conditioner"};
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const char* k : known)
            if (key == k) ok = true;
        if (!ok) throw FormatError("train config: unknown key '" + key + "'");
    }
    TrainConfig c;
    if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        for (const auto& [key, value] : o.items()) {
            (void)value;
            if (key != "learning_rate" && key != "beta1" && key != "beta2" && key != "epsilon")
                throw FormatError("train config optimizer: unknown key '" + key + "'");
        }
        if (o.contains("learning_rate")) c.optimizer.learning_rate = o["learning_rate"].get<double>();
        if (o.contains("beta1")) c.optimizer.beta1 = o["beta1"].get<double>();
        if (o.contains("beta2")) c.optimizer.beta2 = o["beta2"].get<double>();
        if (o.contains("epsilon")) c.optimizer.epsilon = o["epsilon"].get<double>();
    }
    if (j.contains("batch")) {
        const auto& b = j["batch"];
        for (const auto& [key, value] : b.items()) {
            (void)value;
            if (key != "window_samples" && key != "batch_size")
                throw FormatError("train config batch: unknown key '" + key + "'");
        }
        if (b.contains("window_samples")) c.batch.window_samples = b["window_samples"].get<int>();
        if (b.contains("batch_size")) c.batch.batch_size = b["batch_size"].get<int>();
    }
    if (j.contains("steps")) c.steps = j["steps"].get<long>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("loss_weights")) {
        const auto& w = j["loss_weights"];
        for (const auto& [key, value] : w.items()) {
            (void)value;
            if (key != "cepstra" && key != "logf0" && key != "vuv")
                throw FormatError("train config loss_weights: unknown key '" + key + "'");
        }
        if (w.contains("cepstra")) c.loss_weights.cepstra = w["cepstra"].get<double>();
        if (w.contains("logf0")) c.loss_weights.logf0 = w["logf0"].get<double>();
        if (w.contains("vuv")) c.loss_weights.vuv = w["vuv"].get<double>();
    }
    if (j.contains("checkpoint_every")) c.checkpoint_every = j["checkpoint_every"].get<long>();
    if (j.contains("model")) c.model = wavenet_config_from_json(j["model"].dump());
    if (j.contains("conditioner"))
        c.conditioner = conditioner_config_from_json(j["conditioner"].dump());
    if (c.steps < 1) throw ArgumentError("train config: steps must be >= 1");
    if (c.batch.batch_size < 1) throw ArgumentError("train config: batch_size must be >= 1");
    if (c.checkpoint_every < 1) throw ArgumentError("train config: checkpoint_every must be >= 1");
    return c;
}

// ---- normalization ----

FeatureNormalization FeatureNormalization::compute(const std::vector<Utterance>& utterances) {
    if (utterances.empty()) throw ArgumentError("FeatureNormalization: empty corpus");
    const std::size_t n_cep = utterances.front().cepstra.dim(0);
    std::vector<double> sum(n_cep, 0.0), sq(n_cep, 0.0);
    double f0_sum = 0.0, f0_sq = 0.0;
    std::size_t frames = 0, voiced = 0;
    for (const auto& utt : utterances) {
        const std::size_t f_total = utt.frames();
        const auto cep = utt.cepstra.data();
        const auto lf = utt.logf0.data();
        const auto vf = utt.vuv.data();
        for (std::size_t f = 0; f < f_total; ++f) {
            for (std::size_t k = 0; k < n_cep; ++k) {
                const double v = cep[k * f_total + f];
                sum[k] += v;
                sq[k] += v * v;
            }
            if (vf[f] != 0.0) {
                f0_sum += lf[f];
                f0_sq += lf[f] * lf[f];
                ++voiced;
            }
        }
        frames += f_total;
    }
    FeatureNormalization norm;
    norm.cep_mean = Tensor::zeros({n_cep});
    norm.cep_std = Tensor::zeros({n_cep});
    for (std::size_t k = 0; k < n_cep; ++k) {
        const double mean = sum[k] / static_cast<double>(frames);
        const double var = std::max(0.0, sq[k] / static_cast<double>(frames) - mean * mean);
        norm.cep_mean.data()[k] = mean;
        norm.cep_std.data()[k] = std::max(std::sqrt(var), 1e-6);
    }
    if (voiced > 0) {
        norm.logf0_mean = f0_sum / static_cast<double>(voiced);
        const double var =
            std::max(0.0, f0_sq / static_cast<double>(voiced) - norm.logf0_mean * norm.logf0_mean);
        norm.logf0_std = std::max(std::sqrt(var), 1e-6);
    }
    return norm;
}

// ---- composite loss ----

CompositeLoss composite_loss(const Tensor& logits, const std::vector<int>& target_bins,
                             const SecondaryPrediction& prediction,
                             const SecondaryTargets& targets, const Tensor& vuv_mask,
                             const LossWeights& weights) {
    CompositeLoss loss;
    loss.ce = softmax_cross_entropy(logits, target_bins);
    loss.total = loss.ce;
    if (prediction.cepstra.valid()) {
        loss.cepstra = mse(prediction.cepstra, targets.cepstra);
        loss.total = add(loss.total, scale(loss.cepstra, weights.cepstra));
    }
    if (prediction.logf0.valid()) {
        loss.logf0 = mse(prediction.logf0, targets.logf0, vuv_mask);
        loss.total = add(loss.total, scale(loss.logf0, weights.logf0));
    }
    if (prediction.vuv.valid()) {
        loss.vuv = mse(prediction.vuv, targets.vuv);
        loss.total = add(loss.total, scale(loss.vuv, weights.vuv));
    }
    return loss;
}

// ---- condition features per mode ----

namespace {

Tensor build_condition_features(const Utterance& utt, ConditionMode mode) {
    if (mode != ConditionMode::kLinguisticPlusF0) return utt.linguistic;
    // Oracle log F0 and V/UV appended below the linguistic rows.
    const std::size_t d_lin = utt.linguistic.dim(0);
    const std::size_t f_total = utt.linguistic.dim(1);
    Tensor out = Tensor::zeros({d_lin + 2, f_total});
    auto os = out.data();
    std::copy(utt.linguistic.data().begin(), utt.linguistic.data().end(), os.begin());
    std::copy(utt.logf0.data().begin(), utt.logf0.data().end(),
              os.begin() + d_lin * f_total);
    std::copy(utt.vuv.data().begin(), utt.vuv.data().end(),
              os.begin() + (d_lin + 1) * f_total);
    return out;
}

SecondaryTargets normalize_targets(const Utterance& utt, const FeatureNormalization& norm) {
    const std::size_t n_cep = utt.cepstra.dim(0);
    const std::size_t f_total = utt.frames();
    SecondaryTargets t;
    t.cepstra = Tensor::zeros({n_cep, f_total});
    auto cs = t.cepstra.data();
    const auto src = utt.cepstra.data();
    const auto mean = norm.cep_mean.data();
    const auto stdev = norm.cep_std.data();
    for (std::size_t k = 0; k < n_cep; ++k)
        for (std::size_t f = 0; f < f_total; ++f)
            cs[k * f_total + f] = (src[k * f_total + f] - mean[k]) / stdev[k];
    t.logf0 = Tensor::zeros({1, f_total});
    auto lf = t.logf0.data();
    const auto lsrc = utt.logf0.data();
    const auto vf = utt.vuv.data();
    for (std::size_t f = 0; f < f_total; ++f)
        if (vf[f] != 0.0) lf[f] = (lsrc[f] - norm.logf0_mean) / norm.logf0_std;
    t.vuv = utt.vuv;
    return t;
}

}  // namespace

// ---- TrainingSet ----

TrainingSet TrainingSet::build(std::vector<Utterance> utterances, ConditionMode mode,
                               int n_cepstra) {
    if (utterances.empty()) throw ArgumentError("TrainingSet: empty corpus");
    TrainingSet set;
    set.frame_shift_ = utterances.front().frame_shift;
    set.n_cepstra_ = n_cepstra;
    for (const auto& utt : utterances) {
        if (utt.frame_shift != set.frame_shift_)
            throw ArgumentError("TrainingSet: inconsistent frame_shift across utterances");
        if (utt.cepstra.dim(0) != static_cast<std::size_t>(n_cepstra))
            throw DimensionError("TrainingSet: corpus cepstra dim does not match model config");
    }
    set.norm_ = FeatureNormalization::compute(utterances);
    for (const auto& utt : utterances) {
        QuantizedWaveform q = mulaw_encode(utt.waveform);
        set.bins_.push_back(std::move(q.bins));
        set.condition_.push_back(build_condition_features(utt, mode));
        set.targets_.push_back(normalize_targets(utt, set.norm_));
    }
    set.condition_dim_ = static_cast<int>(set.condition_.front().dim(0));

    // Normalized cepstrum of digital silence, used for left-pad frames.
    WaveformBuffer silence;
    silence.sample_rate = utterances.front().waveform.sample_rate;
    silence.samples.assign(static_cast<std::size_t>(set.frame_shift_), 0.0);
    Tensor sil = extract_cepstra(silence, set.frame_shift_, utterances.front().frame_length,
                                 n_cepstra);
    set.silence_cepstrum_norm_.resize(static_cast<std::size_t>(n_cepstra));
    for (int k = 0; k < n_cepstra; ++k)
        set.silence_cepstrum_norm_[static_cast<std::size_t>(k)] =
            (sil.data()[static_cast<std::size_t>(k)] - set.norm_.cep_mean.data()[static_cast<std::size_t>(k)]) /
            set.norm_.cep_std.data()[static_cast<std::size_t>(k)];

    set.utterances_ = std::move(utterances);
    return set;
}

TrainingBatch TrainingSet::make_batch(const BatchConfig& batch, std::uint64_t seed,
                                      long step) const {
    if (batch.window_samples < 1 || batch.window_samples % frame_shift_ != 0)
        throw ArgumentError("make_batch: window_samples must be a positive frame multiple");
    const std::size_t w_len = static_cast<std::size_t>(batch.window_samples);
    const std::size_t w_frames = w_len / static_cast<std::size_t>(frame_shift_);
    Rng rng(mix_seed(mix_seed(seed, 0xBA7C4ULL), static_cast<std::uint64_t>(step)));

    TrainingBatch out;
    out.reserve(static_cast<std::size_t>(batch.batch_size));
    for (int b = 0; b < batch.batch_size; ++b) {
        const std::size_t u = rng.uniform_index(utterances_.size());
        const auto& bins = bins_[u];
        const auto& cond = condition_[u];
        const auto& tgt = targets_[u];
        const std::size_t f_utt = cond.dim(1);
        const std::size_t d_cond = cond.dim(0);
        const std::size_t n_cep = static_cast<std::size_t>(n_cepstra_);

        TrainingWindow win;
        win.target_bins.resize(w_len);
        win.input_bins.resize(w_len);
        win.condition = Tensor::zeros({d_cond, w_frames});
        win.targets.cepstra = Tensor::zeros({n_cep, w_frames});
        win.targets.logf0 = Tensor::zeros({1, w_frames});
        win.targets.vuv = Tensor::zeros({1, w_frames});

        std::size_t pad_frames = 0, start_frame = 0;
        if (f_utt >= w_frames) {
            start_frame = rng.uniform_index(f_utt - w_frames + 1);
        } else {
            pad_frames = w_frames - f_utt;  // short utterance: left-pad with silence
        }
        const std::size_t pad_samples = pad_frames * static_cast<std::size_t>(frame_shift_);
        const std::size_t start_sample = start_frame * static_cast<std::size_t>(frame_shift_);

        for (std::size_t j = 0; j < w_len; ++j)
            win.target_bins[j] =
                j < pad_samples ? 128 : bins[start_sample + j - pad_samples];
        win.input_bins[0] =
            (pad_samples == 0 && start_sample > 0) ? bins[start_sample - 1] : 128;
        for (std::size_t j = 1; j < w_len; ++j) win.input_bins[j] = win.target_bins[j - 1];

        auto cw = win.condition.data();
        auto cepw = win.targets.cepstra.data();
        auto lfw = win.targets.logf0.data();
        auto vw = win.targets.vuv.data();
        const auto cs = cond.data();
        const auto ceps = tgt.cepstra.data();
        const auto lfs = tgt.logf0.data();
        const auto vs = tgt.vuv.data();
        for (std::size_t f = 0; f < w_frames; ++f) {
            if (f < pad_frames) {
                for (std::size_t k = 0; k < n_cep; ++k)
                    cepw[k * w_frames + f] = silence_cepstrum_norm_[k];
                continue;  // condition, logf0, vuv stay zero
            }
            const std::size_t src = start_frame + f - pad_frames;
            for (std::size_t d = 0; d < d_cond; ++d)
                cw[d * w_frames + f] = cs[d * f_utt + src];
            for (std::size_t k = 0; k < n_cep; ++k)
                cepw[k * w_frames + f] = ceps[k * f_utt + src];
            lfw[f] = lfs[src];
            vw[f] = vs[src];
        }
        win.vuv_mask = win.targets.vuv;
        out.push_back(std::move(win));
    }
    return out;
}

// ---- Adam ----

Adam::Adam(ParamMap params, AdamConfig config) : params_(std::move(params)), config_(config) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].second.size(), 0.0);
        v_[i].assign(params_[i].second.size(), 0.0);
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) {
        (void)name;
        p.node()->ensure_grad();
        p.zero_grad();
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        p.node()->ensure_grad();
        const auto g = p.grad();
        auto w = p.data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            w[j] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
        }
    }
}

void Adam::restore_state(long t, std::vector<std::vector<double>> m,
                         std::vector<std::vector<double>> v) {
    if (m.size() != params_.size() || v.size() != params_.size())
        throw FormatError("Adam::restore_state: moment count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (m[i].size() != params_[i].second.size() || v[i].size() != params_[i].second.size())
            throw FormatError("Adam::restore_state: moment shape mismatch for " +
                              params_[i].first);
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

// ---- TrainedModel ----

ParamMap TrainedModel::collect_params() const {
    ParamMap params;
    conditioner.collect_params(params, "cond");
    net.collect_params(params, "model");
    if (mode == ConditionMode::kMtl) head.collect_params(params, "head");
    return params;
}

Tensor TrainedModel::condition_features(const Utterance& utterance) const {
    return build_condition_features(utterance, mode);
}

// ---- checkpoints ----

void checkpoint_save(const std::filesystem::path& path, const TrainedModel& model,
                     const TrainConfig& config, long step, const Adam* optimizer,
                     const std::string& run_id) {
    Container c;
    c.kind = "checkpoint";
    json meta;
    meta["run_id"] = run_id;
    meta["step"] = step;
    meta["mode"] = condition_mode_name(model.mode);
    meta["frame_shift"] = model.frame_shift;
    meta["n_symbols"] = model.n_symbols;
    meta["logf0_mean"] = model.norm.logf0_mean;
    meta["logf0_std"] = model.norm.logf0_std;
    meta["train_config"] = json::parse(train_config_to_json(config));
    // rng provenance: batches are a pure function of (seed, step), so the
    // pair fully determines the resumed stream.
    meta["rng"] = {{"seed", config.seed}, {"next_step", step}};
    meta["adam_t"] = optimizer ? optimizer->steps_taken() : 0;
    c.meta_json = meta.dump();

    c.add("norm.cep_mean", model.norm.cep_mean);
    c.add("norm.cep_std", model.norm.cep_std);
    for (const auto& [name, p] : model.collect_params()) c.add(name, p);
    if (optimizer) {
        const auto& params = optimizer->params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            NamedArray m{"opt.m." + params[i].first, params[i].second.shape(),
                         optimizer->first_moments()[i]};
            NamedArray v{"opt.v." + params[i].first, params[i].second.shape(),
                         optimizer->second_moments()[i]};
            c.arrays.push_back(std::move(m));
            c.arrays.push_back(std::move(v));
        }
    }
    container_write(path, c);
}

LoadedCheckpoint checkpoint_load(const std::filesystem::path& path) {
    Container c = container_read(path);
    if (c.kind != "checkpoint")
        throw FormatError("checkpoint_load: container kind '" + c.kind +
                          "' is not 'checkpoint'");
    json meta = json::parse(c.meta_json);

    LoadedCheckpoint loaded;
    loaded.run_id = meta.at("run_id").get<std::string>();
    loaded.step = meta.at("step").get<long>();
    loaded.adam_t = meta.value("adam_t", 0L);
    loaded.config = train_config_from_json(meta.at("train_config").dump());

    TrainedModel& model = loaded.model;
    model.mode = condition_mode_from_name(meta.at("mode").get<std::string>());
    model.frame_shift = meta.at("frame_shift").get<int>();
    model.n_symbols = meta.at("n_symbols").get<int>();
    model.norm.logf0_mean = meta.at("logf0_mean").get<double>();
    model.norm.logf0_std = meta.at("logf0_std").get<double>();
    model.norm.cep_mean = c.tensor("norm.cep_mean");
    model.norm.cep_std = c.tensor("norm.cep_std");

    Rng scratch(0);
    model.conditioner = Conditioner::init(loaded.config.conditioner, scratch);
    model.net = WaveNet::init(loaded.config.model, scratch);
    if (model.mode == ConditionMode::kMtl) model.head = MTLHead::init(loaded.config.model, scratch);

    for (auto& [name, p] : model.collect_params()) {
        const NamedArray& a = c.require(name);
        if (a.shape != p.shape())
            throw FormatError("checkpoint_load: shape mismatch for '" + name + "'");
        std::copy(a.values.begin(), a.values.end(), p.data().begin());
    }
    for (const auto& [name, p] : model.collect_params()) {
        if (const auto* m = c.find("opt.m." + name)) {
            loaded.adam_m.push_back(m->values);
            loaded.adam_v.push_back(c.require("opt.v." + name).values);
        }
        (void)p;
    }
    return loaded;
}

// ---- trainer ----

namespace {

class BatchQueue {
public:
    explicit BatchQueue(std::size_t capacity) : capacity_(capacity) {}

    void push(TrainingBatch batch) {
        std::unique_lock lock(mutex_);
        not_full_.wait(lock, [this] { return queue_.size() < capacity_ || closed_; });
        if (closed_) return;
        queue_.push_back(std::move(batch));
        not_empty_.notify_one();
    }

    bool pop(TrainingBatch& out) {
        std::unique_lock lock(mutex_);
        not_empty_.wait(lock, [this] { return !queue_.empty() || closed_; });
        if (queue_.empty()) return false;
        out = std::move(queue_.front());
        queue_.pop_front();
        not_full_.notify_one();
        return true;
    }

    void close() {
        std::lock_guard lock(mutex_);
        closed_ = true;
        not_empty_.notify_all();
        not_full_.notify_all();
    }

private:
    std::mutex mutex_;
    std::condition_variable not_full_, not_empty_;
    std::deque<TrainingBatch> queue_;
    std::size_t capacity_;
    bool closed_ = false;
};

std::string checkpoint_name(long step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%07ld.mtwc", step);
    return buf;
}

Tensor one_hot_from_bins(const std::vector<std::uint8_t>& bins) {
    const std::size_t t_len = bins.size();
    Tensor out = Tensor::zeros({256, t_len});
    auto os = out.data();
    for (std::size_t t = 0; t < t_len; ++t) os[bins[t] * t_len + t] = 1.0;
    return out;
}

}  // namespace

TrainResult train(std::vector<Utterance> corpus, const TrainOptions& options) {
    TrainConfig config = options.config;
    const ConditionMode mode = options.mode;

    TrainingSet set = TrainingSet::build(std::move(corpus), mode, config.model.mtl.n_cepstra);

    // Resolve the conditioner input width from the corpus + mode, and force
    // the model's condition width to the conditioner encoding width.
    config.conditioner.input_dim = set.condition_dim();
    config.model.condition_dim = config.conditioner.encoding_dim();
    config.model.validate();

    const int rf = receptive_field(config.model);
    if (config.batch.window_samples == 0) config.batch.window_samples = 2 * rf;
    const int shift = set.frame_shift();
    config.batch.window_samples =
        ((config.batch.window_samples + shift - 1) / shift) * shift;
    if (config.batch.window_samples <= rf)
        throw ArgumentError("train: window_samples (" +
                            std::to_string(config.batch.window_samples) +
                            ") must exceed the receptive field (" + std::to_string(rf) + ")");

    TrainedModel model;
    long start_step = 0;
    std::optional<LoadedCheckpoint> resumed;
    if (options.resume) {
        resumed = checkpoint_load(*options.resume);
        if (resumed->model.mode != mode)
            throw ArgumentError("train: checkpoint mode '" +
                                condition_mode_name(resumed->model.mode) +
                                "' does not match requested mode '" +
                                condition_mode_name(mode) + "'");
        model = std::move(resumed->model);
        // The checkpoint owns the recipe (architecture, seed, batching) so
        // the continued stream is bit-identical; the caller only extends the
        // step budget.
        const long requested_steps = config.steps;
        const long requested_every = config.checkpoint_every;
        config = resumed->config;
        config.steps = requested_steps;
        config.checkpoint_every = requested_every;
        start_step = resumed->step;
        if (start_step >= config.steps)
            throw ArgumentError("train: checkpoint is already at step " +
                                std::to_string(start_step) + " >= steps " +
                                std::to_string(config.steps));
    } else {
        Rng init_rng(config.seed);
        model.mode = mode;
        model.conditioner = Conditioner::init(config.conditioner, init_rng);
        model.net = WaveNet::init(config.model, init_rng);
        if (mode == ConditionMode::kMtl) model.head = MTLHead::init(config.model, init_rng);
        model.norm = set.normalization();
        model.frame_shift = shift;
    }

    Adam optimizer(model.collect_params(), config.optimizer);
    if (resumed && !resumed->adam_m.empty())
        optimizer.restore_state(resumed->adam_t, std::move(resumed->adam_m),
                                std::move(resumed->adam_v));

    std::filesystem::create_directories(options.out_dir);
    const auto log_path = options.out_dir / "loss_log.jsonl";
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("train: cannot open " + log_path.string());
    log << json{{"run_id", options.run_id}}.dump() << "\n";  // header record

    const bool mtl = mode == ConditionMode::kMtl;
    TrainResult result;
    result.loss_log = log_path;

    BatchQueue queue(4);
    std::thread producer([&set, &config, start_step, &queue] {
        for (long s = start_step; s < config.steps; ++s)
            queue.push(set.make_batch(config.batch, config.seed, s));
        queue.close();
    });

    const auto t0 = std::chrono::steady_clock::now();
    try {
        TrainingBatch batch;
        for (long s = start_step; s < config.steps; ++s) {
            if (!queue.pop(batch))
                throw UsageError("train: batch stream ended early");
            optimizer.zero_grad();

            Tensor total;
            double ce_acc = 0, cep_acc = 0, f0_acc = 0, vuv_acc = 0;
            for (const auto& win : batch) {
                ConditionSequence cond{win.condition, shift};
                auto [frame_enc, sample_enc] = model.conditioner.forward(cond);
                Tensor logits =
                    model.net.forward_inputs(one_hot_from_bins(win.input_bins), sample_enc);
                std::vector<int> targets(win.target_bins.begin(), win.target_bins.end());
                SecondaryPrediction pred;
                if (mtl) pred = mtl_head_forward(model.head, frame_enc);
                CompositeLoss loss = composite_loss(logits, targets, pred, win.targets,
                                                    win.vuv_mask, config.loss_weights);
                ce_acc += loss.ce.item();
                if (mtl) {
                    cep_acc += loss.cepstra.item();
                    f0_acc += loss.logf0.item();
                    vuv_acc += loss.vuv.item();
                }
                total = total.valid() ? add(total, loss.total) : loss.total;
            }
            const double inv_b = 1.0 / static_cast<double>(batch.size());
            total = scale(total, inv_b);

            if (!std::isfinite(total.item())) {
                backward(total);
                for (const auto& [name, p] : optimizer.params()) {
                    if (p.node()->grad.size() != p.size()) continue;
                    for (double g : p.grad())
                        if (!std::isfinite(g))
                            throw NumericError("train: non-finite gradient in parameter '" +
                                               name + "' at step " + std::to_string(s));
                }
                throw NumericError("train: non-finite loss at step " + std::to_string(s));
            }
            backward(total);
            optimizer.step();

            LossRecord rec;
            rec.step = s;
            rec.ce = ce_acc * inv_b;
            rec.total = total.item();
            rec.wall_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            json jl;
            jl["step"] = rec.step;
            jl["ce"] = rec.ce;
            if (mtl) {
                rec.cep = cep_acc * inv_b;
                rec.f0 = f0_acc * inv_b;
                rec.vuv = vuv_acc * inv_b;
                jl["cep"] = rec.cep;
                jl["f0"] = rec.f0;
                jl["vuv"] = rec.vuv;
            }
            jl["total"] = rec.total;
            jl["wall_ms"] = rec.wall_ms;
            log << jl.dump() << "\n";
            result.records.push_back(rec);

            const long done = s + 1;
            if (done % config.checkpoint_every == 0 && done != config.steps)
                checkpoint_save(options.out_dir / checkpoint_name(done), model, config, done,
                                &optimizer, options.run_id);
        }
    } catch (...) {
        queue.close();
        producer.join();
        throw;
    }
    queue.close();
    producer.join();

    log.flush();
    if (!log) throw IoError("train: loss log write failed");

    result.final_checkpoint = options.out_dir / checkpoint_name(config.steps);
    checkpoint_save(result.final_checkpoint, model, config, config.steps, &optimizer,
                    options.run_id);
    return result;
}

}  // namespace mtwn
