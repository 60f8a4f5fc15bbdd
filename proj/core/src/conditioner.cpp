#include "mtwn/conditioner.hpp"

#include <cmath>

namespace mtwn {

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool trainable) {
    Tensor t = Tensor::zeros(std::move(shape), trainable);
    for (double& v : t.data()) v = stddev * rng.normal();
    return t;
}

}  // namespace

QRNNLayer QRNNLayer::init(int c_in, int c_out, int filter_width, Rng& rng, bool trainable) {
    if (c_in < 1 || c_out < 1 || filter_width < 1)
        throw ArgumentError("QRNNLayer::init: channels and filter width must be >= 1");
    const auto ci = static_cast<std::size_t>(c_in);
    const auto co = static_cast<std::size_t>(c_out);
    const auto k = static_cast<std::size_t>(filter_width);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(ci * k));
    QRNNLayer layer;
    layer.w_h = normal_tensor({co, ci, k}, stddev, rng, trainable);
    layer.w_o = normal_tensor({co, ci, k}, stddev, rng, trainable);
    layer.w_f = normal_tensor({co, ci, k}, stddev, rng, trainable);
    layer.b_h = Tensor::zeros({co}, trainable);
    layer.b_o = Tensor::zeros({co}, trainable);
    layer.b_f = Tensor::zeros({co}, trainable);
    return layer;
}

void QRNNLayer::collect_params(ParamMap& params, const std::string& prefix) const {
    params.emplace_back(prefix + ".w_h", w_h);
    params.emplace_back(prefix + ".w_o", w_o);
    params.emplace_back(prefix + ".w_f", w_f);
    params.emplace_back(prefix + ".b_h", b_h);
    params.emplace_back(prefix + ".b_o", b_o);
    params.emplace_back(prefix + ".b_f", b_f);
}

Tensor qrnn_forward(const QRNNLayer& layer, const Tensor& input) {
    const Tensor h_hat = tanh(conv1d_causal(input, layer.w_h, layer.b_h, 1));
    const Tensor o = sigmoid(conv1d_causal(input, layer.w_o, layer.b_o, 1));
    const Tensor f = sigmoid(conv1d_causal(input, layer.w_f, layer.b_f, 1));
    const Tensor h0 = Tensor::zeros({static_cast<std::size_t>(layer.out_channels())});
    return fo_pool(h_hat, o, f, h0);
}

Tensor bidirectional_qrnn(const QRNNLayer& fwd, const QRNNLayer& bwd, const Tensor& input) {
    if (fwd.out_channels() != bwd.out_channels())
        throw DimensionError("bidirectional_qrnn: direction output widths differ");
    const Tensor forward_half = qrnn_forward(fwd, input);
    const Tensor backward_half = reverse_cols(qrnn_forward(bwd, reverse_cols(input)));
    return concat_rows(forward_half, backward_half);
}

Tensor upsample_repeat(const Tensor& frames, int factor) {
    if (factor < 1) throw ArgumentError("upsample_repeat: factor must be >= 1");
    return repeat_cols(frames, factor);
}

Conditioner Conditioner::init(const ConditionerConfig& config, Rng& rng) {
    if (config.num_layers < 1) throw ArgumentError("Conditioner::init: need at least one layer");
    Conditioner c;
    c.config_ = config;
    int c_in = config.input_dim;
    for (int l = 0; l < config.num_layers; ++l) {
        QRNNLayer fwd =
            QRNNLayer::init(c_in, config.channels_per_direction, config.filter_width, rng);
        QRNNLayer bwd =
            QRNNLayer::init(c_in, config.channels_per_direction, config.filter_width, rng);
        c.layers_.emplace_back(std::move(fwd), std::move(bwd));
        c_in = config.encoding_dim();
    }
    return c;
}

Tensor Conditioner::frame_encoding(const Tensor& features) const {
    if (layers_.empty()) throw UsageError("Conditioner: not initialized");
    Tensor h = features;
    for (const auto& [fwd, bwd] : layers_) h = bidirectional_qrnn(fwd, bwd, h);
    return h;
}

std::pair<Tensor, Tensor> Conditioner::forward(const ConditionSequence& cond) const {
    Tensor frames = frame_encoding(cond.features);
    Tensor samples = upsample_repeat(frames, cond.frame_shift);
    return {std::move(frames), std::move(samples)};
}

void Conditioner::collect_params(ParamMap& params, const std::string& prefix) const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        layers_[l].first.collect_params(params, prefix + ".layer" + std::to_string(l) + ".fwd");
        layers_[l].second.collect_params(params, prefix + ".layer" + std::to_string(l) + ".bwd");
    }
}

}  // namespace mtwn
