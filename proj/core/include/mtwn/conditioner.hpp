#pragma once

#include <utility>
#include <vector>

#include "mtwn/rng.hpp"
#include "mtwn/tensor.hpp"

namespace mtwn {

// One unidirectional QRNN layer: three causal convolutions feeding the
// fo-pooling recurrence.
struct QRNNLayer {
    Tensor w_h, w_o, w_f;  // [C_out x C_in x K]
    Tensor b_h, b_o, b_f;  // [C_out]

    int in_channels() const { return static_cast<int>(w_h.dim(1)); }
    int out_channels() const { return static_cast<int>(w_h.dim(0)); }
    int filter_width() const { return static_cast<int>(w_h.dim(2)); }

    static QRNNLayer init(int c_in, int c_out, int filter_width, Rng& rng, bool trainable = true);
    void collect_params(ParamMap& params, const std::string& prefix) const;
};

// Frame-rate condition features plus the upsampling factor to sample rate.
struct ConditionSequence {
    Tensor features;  // [D_lin x F]
    int frame_shift = 80;
};

// hhat = tanh(W_h * x + B_h), o = sigmoid(W_o * x + B_o),
// f = sigmoid(W_f * x + B_f), then fo-pooling from a zero initial state.
// Convolutions are causal within the running direction.
Tensor qrnn_forward(const QRNNLayer& layer, const Tensor& input);

// Forward pass over the input and a reversed pass over the reversed input,
// concatenated along channels: [2*C_out x T].
Tensor bidirectional_qrnn(const QRNNLayer& fwd, const QRNNLayer& bwd, const Tensor& input);

// Repeats each frame column `factor` times.
Tensor upsample_repeat(const Tensor& frames, int factor);

struct ConditionerConfig {
    int input_dim = 11;
    int num_layers = 2;
    int channels_per_direction = 64;
    int filter_width = 2;

    int encoding_dim() const { return 2 * channels_per_direction; }
};

// The conditional network shared by the sample-level model and the
// frame-level prediction head: a stack of bidirectional QRNN layers.
// Stacked layers consume the channel concatenation of both directions.
class Conditioner {
public:
    Conditioner() = default;
    static Conditioner init(const ConditionerConfig& config, Rng& rng);

    const ConditionerConfig& config() const { return config_; }
    std::vector<std::pair<QRNNLayer, QRNNLayer>>& layers() { return layers_; }
    const std::vector<std::pair<QRNNLayer, QRNNLayer>>& layers() const { return layers_; }

    // Top-layer output at frame rate, [D_enc x F].
    Tensor frame_encoding(const Tensor& features) const;

    // (frame_encoding, sample_encoding) where the sample encoding is the
    // frame encoding repeat-upsampled by cond.frame_shift.
    std::pair<Tensor, Tensor> forward(const ConditionSequence& cond) const;

    void collect_params(ParamMap& params, const std::string& prefix) const;

private:
    ConditionerConfig config_;
    std::vector<std::pair<QRNNLayer, QRNNLayer>> layers_;  // (forward, backward) per level
};

}  // namespace mtwn
