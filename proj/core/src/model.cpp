#include "mtwn/model.hpp"

#include <cmath>

#include <json.hpp>

namespace mtwn {

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.data()) v = stddev * rng.normal();
    return t;
}

void check_one_hot(const Tensor& x, const char* what) {
    const std::size_t v_dim = x.dim(0), t_len = x.dim(1);
    const auto xs = x.data();
    for (std::size_t t = 0; t < t_len; ++t) {
        int ones = 0;
        for (std::size_t v = 0; v < v_dim; ++v) {
            const double e = xs[v * t_len + t];
            if (e == 1.0)
                ++ones;
            else if (e != 0.0)
                throw UsageError(std::string(what) + ": input is not one-hot at column " +
                                 std::to_string(t));
        }
        if (ones != 1)
            throw UsageError(std::string(what) + ": input is not one-hot at column " +
                             std::to_string(t));
    }
}

}  // namespace

std::vector<int> WaveNetConfig::dilations() const {
    std::vector<int> d;
    d.reserve(static_cast<std::size_t>(total_layers()));
    for (int s = 0; s < num_stacks; ++s)
        for (int l = 0; l < layers_per_stack; ++l) d.push_back(1 << l);
    return d;
}

void WaveNetConfig::validate() const {
    if (num_stacks < 1) throw ArgumentError("WaveNetConfig: num_stacks must be >= 1");
    if (layers_per_stack < 1) throw ArgumentError("WaveNetConfig: layers_per_stack must be >= 1");
    if (layers_per_stack > 30) throw ArgumentError("WaveNetConfig: layers_per_stack too large");
    if (filter_width < 1) throw ArgumentError("WaveNetConfig: filter_width must be >= 1");
    if (residual_channels < 1 || skip_channels < 1 || gate_channels < 1)
        throw ArgumentError("WaveNetConfig: channel widths must be >= 1");
    if (condition_dim < 1) throw ArgumentError("WaveNetConfig: condition_dim must be >= 1");
    if (quantization_levels != 256)
        throw ArgumentError("WaveNetConfig: quantization_levels must be 256");
    if (mtl.n_cepstra < 1) throw ArgumentError("WaveNetConfig: mtl.n_cepstra must be >= 1");
}

WaveNetConfig WaveNetConfig::desk_default() {
    WaveNetConfig c;
    c.num_stacks = 2;
    c.layers_per_stack = 6;
    c.residual_channels = 32;
    c.gate_channels = 32;
    c.skip_channels = 64;
    c.condition_dim = 128;
    return c;
}

int receptive_field(const WaveNetConfig& config) {
    config.validate();
    long total = 0;
    for (int d : config.dilations()) total += d;
    return static_cast<int>(1 + static_cast<long>(config.filter_width - 1) * total);
}

ResidualBlock ResidualBlock::init(const WaveNetConfig& config, int dilation, Rng& rng) {
    const auto r = static_cast<std::size_t>(config.residual_channels);
    const auto g = static_cast<std::size_t>(config.gate_channels);
    const auto s = static_cast<std::size_t>(config.skip_channels);
    const auto d_enc = static_cast<std::size_t>(config.condition_dim);
    const auto k = static_cast<std::size_t>(config.filter_width);
    ResidualBlock block;
    block.dilation = dilation;
    const double conv_std = 1.0 / std::sqrt(static_cast<double>(r * k));
    block.conv_filter_w = normal_tensor({g, r, k}, conv_std, rng);
    block.conv_gate_w = normal_tensor({g, r, k}, conv_std, rng);
    block.conv_filter_b = Tensor::zeros({g}, true);
    block.conv_gate_b = Tensor::zeros({g}, true);
    const double cond_std = 1.0 / std::sqrt(static_cast<double>(d_enc));
    block.cond_filter_w = normal_tensor({g, d_enc}, cond_std, rng);
    block.cond_gate_w = normal_tensor({g, d_enc}, cond_std, rng);
    const double mix_std = 1.0 / std::sqrt(static_cast<double>(g));
    block.res_w = normal_tensor({r, g}, mix_std, rng);
    block.res_b = Tensor::zeros({r}, true);
    block.skip_w = normal_tensor({s, g}, mix_std, rng);
    block.skip_b = Tensor::zeros({s}, true);
    return block;
}

void ResidualBlock::collect_params(ParamMap& params, const std::string& prefix) const {
    params.emplace_back(prefix + ".conv_filter_w", conv_filter_w);
    params.emplace_back(prefix + ".conv_filter_b", conv_filter_b);
    params.emplace_back(prefix + ".conv_gate_w", conv_gate_w);
    params.emplace_back(prefix + ".conv_gate_b", conv_gate_b);
    params.emplace_back(prefix + ".cond_filter_w", cond_filter_w);
    params.emplace_back(prefix + ".cond_gate_w", cond_gate_w);
    params.emplace_back(prefix + ".res_w", res_w);
    params.emplace_back(prefix + ".res_b", res_b);
    params.emplace_back(prefix + ".skip_w", skip_w);
    params.emplace_back(prefix + ".skip_b", skip_b);
}

BlockOutput residual_block_forward(const ResidualBlock& block, const Tensor& h, const Tensor& c) {
    if (h.dim(1) != c.dim(1))
        throw DimensionError("residual_block_forward: h and c time lengths differ");
    // Condition projections are pointwise; bias lives in the dilated convs.
    const std::size_t g_dim = block.cond_filter_w.dim(0);
    const Tensor zero_bias = Tensor::zeros({g_dim});
    const Tensor filter_pre = add(conv1d_causal(h, block.conv_filter_w, block.conv_filter_b,
                                                block.dilation),
                                  conv1x1(c, block.cond_filter_w, zero_bias));
    const Tensor gate_pre = add(conv1d_causal(h, block.conv_gate_w, block.conv_gate_b,
                                              block.dilation),
                                conv1x1(c, block.cond_gate_w, zero_bias));
    const Tensor gated = mul(tanh(filter_pre), sigmoid(gate_pre));
    BlockOutput out;
    out.residual = add(h, conv1x1(gated, block.res_w, block.res_b));
    out.skip = conv1x1(gated, block.skip_w, block.skip_b);
    return out;
}

MTLHead MTLHead::init(const WaveNetConfig& config, Rng& rng) {
    MTLHead head;
    head.mtl = config.mtl;
    const auto out_dim = static_cast<std::size_t>(config.mtl.output_dim());
    const auto d_enc = static_cast<std::size_t>(config.condition_dim);
    head.w = normal_tensor({out_dim, d_enc}, 1.0 / std::sqrt(static_cast<double>(d_enc)), rng);
    head.b = Tensor::zeros({out_dim}, true);
    return head;
}

void MTLHead::collect_params(ParamMap& params, const std::string& prefix) const {
    params.emplace_back(prefix + ".w", w);
    params.emplace_back(prefix + ".b", b);
}

SecondaryPrediction mtl_head_forward(const MTLHead& head, const Tensor& frame_encoding) {
    const Tensor projected = conv1x1(frame_encoding, head.w, head.b);
    SecondaryPrediction pred;
    const auto n_cep = static_cast<std::size_t>(head.mtl.n_cepstra);
    pred.cepstra = slice_rows(projected, 0, n_cep);
    std::size_t row = n_cep;
    if (head.mtl.predict_logf0) {
        pred.logf0 = slice_rows(projected, row, row + 1);
        ++row;
    }
    if (head.mtl.predict_vuv) pred.vuv = sigmoid(slice_rows(projected, row, row + 1));
    return pred;
}

WaveNet WaveNet::init(const WaveNetConfig& config, Rng& rng) {
    config.validate();
    WaveNet net;
    net.config = config;
    const auto q = static_cast<std::size_t>(config.quantization_levels);
    const auto r = static_cast<std::size_t>(config.residual_channels);
    const auto s = static_cast<std::size_t>(config.skip_channels);
    net.input_w = normal_tensor({r, q}, 1.0 / std::sqrt(static_cast<double>(q)), rng);
    net.input_b = Tensor::zeros({r}, true);
    for (int d : config.dilations()) net.blocks.push_back(ResidualBlock::init(config, d, rng));
    net.post1_w = normal_tensor({s, s}, 1.0 / std::sqrt(static_cast<double>(s)), rng);
    net.post1_b = Tensor::zeros({s}, true);
    net.post2_w = Tensor::zeros({q, s}, true);  // zero init: uniform logits at step 0
    net.post2_b = Tensor::zeros({q}, true);
    return net;
}

Tensor WaveNet::forward_inputs(const Tensor& u_onehot, const Tensor& c_samples) const {
    if (u_onehot.dim(0) != static_cast<std::size_t>(config.quantization_levels))
        throw DimensionError("WaveNet::forward_inputs: input rows != quantization levels");
    if (c_samples.dim(0) != static_cast<std::size_t>(config.condition_dim))
        throw DimensionError("WaveNet::forward_inputs: condition rows != condition_dim");
    if (u_onehot.dim(1) != c_samples.dim(1))
        throw DimensionError("WaveNet::forward_inputs: input and condition lengths differ");

    Tensor h = conv1x1(u_onehot, input_w, input_b);
    Tensor skip_sum;
    for (const auto& block : blocks) {
        BlockOutput out = residual_block_forward(block, h, c_samples);
        h = out.residual;
        skip_sum = skip_sum.valid() ? add(skip_sum, out.skip) : out.skip;
    }
    const Tensor s1 = conv1x1(relu(skip_sum), post1_w, post1_b);
    return conv1x1(relu(s1), post2_w, post2_b);
}

Tensor WaveNet::forward(const Tensor& x_onehot, const Tensor& c_samples) const {
    check_one_hot(x_onehot, "WaveNet::forward");
    return forward_inputs(shift_right_one_hot(x_onehot), c_samples);
}

void WaveNet::collect_params(ParamMap& params, const std::string& prefix) const {
    params.emplace_back(prefix + ".input_w", input_w);
    params.emplace_back(prefix + ".input_b", input_b);
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect_params(params, prefix + ".block" + std::to_string(i));
    params.emplace_back(prefix + ".post1_w", post1_w);
    params.emplace_back(prefix + ".post1_b", post1_b);
    params.emplace_back(prefix + ".post2_w", post2_w);
    params.emplace_back(prefix + ".post2_b", post2_b);
}

Tensor shift_right_one_hot(const Tensor& x_onehot) {
    const std::size_t v_dim = x_onehot.dim(0), t_len = x_onehot.dim(1);
    Tensor out = Tensor::zeros({v_dim, t_len});
    if (t_len == 0) return out;
    auto os = out.data();
    const auto xs = x_onehot.data();
    os[128 * t_len + 0] = 1.0;  // mu-law bin of silence seeds position 0
    for (std::size_t v = 0; v < v_dim; ++v)
        for (std::size_t t = 1; t < t_len; ++t) os[v * t_len + t] = xs[v * t_len + (t - 1)];
    return out;
}

// ---- config JSON ----

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known,
                         const char* what) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const char* k : known)
            if (key == k) ok = true;
        if (!ok)
            throw FormatError(std::string(what) + ": unknown key '" + key + "'");
    }
}

}  // namespace

std::string wavenet_config_to_json(const WaveNetConfig& c) {
    json j;
    j["num_stacks"] = c.num_stacks;
    j["layers_per_stack"] = c.layers_per_stack;
    j["filter_width"] = c.filter_width;
    j["residual_channels"] = c.residual_channels;
    j["skip_channels"] = c.skip_channels;
    j["gate_channels"] = c.gate_channels;
    j["condition_dim"] = c.condition_dim;
    j["quantization_levels"] = c.quantization_levels;
    j["mtl"] = {{"n_cepstra", c.mtl.n_cepstra},
                {"predict_logf0", c.mtl.predict_logf0},
                {"predict_vuv", c.mtl.predict_vuv}};
    j["loss_weights"] = {{"cepstra", c.loss_weights.cepstra},
                         {"logf0", c.loss_weights.logf0},
                         {"vuv", c.loss_weights.vuv}};
    return j.dump();
}

WaveNetConfig wavenet_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("wavenet config: invalid JSON: ") + e.what());
    }
    reject_unknown_keys(j,
                        {"num_stacks", "layers_per_stack", "filter_width", "residual_channels",
                         "skip_channels", "gate_channels", "condition_dim",
                         "quantization_levels", "mtl", "loss_weights"},
                        "wavenet config");
    WaveNetConfig c = WaveNetConfig::desk_default();
    if (j.contains("num_stacks")) c.num_stacks = j["num_stacks"].get<int>();
    if (j.contains("layers_per_stack")) c.layers_per_stack = j["layers_per_stack"].get<int>();
    if (j.contains("filter_width")) c.filter_width = j["filter_width"].get<int>();
    if (j.contains("residual_channels")) c.residual_channels = j["residual_channels"].get<int>();
    if (j.contains("skip_channels")) c.skip_channels = j["skip_channels"].get<int>();
    if (j.contains("gate_channels")) c.gate_channels = j["gate_channels"].get<int>();
    if (j.contains("condition_dim")) c.condition_dim = j["condition_dim"].get<int>();
    if (j.contains("quantization_levels"))
        c.quantization_levels = j["quantization_levels"].get<int>();
    if (j.contains("mtl")) {
        const auto& m = j["mtl"];
        reject_unknown_keys(m, {"n_cepstra", "predict_logf0", "predict_vuv"},
                            "wavenet config mtl");
        if (m.contains("n_cepstra")) c.mtl.n_cepstra = m["n_cepstra"].get<int>();
        if (m.contains("predict_logf0")) c.mtl.predict_logf0 = m["predict_logf0"].get<bool>();
        if (m.contains("predict_vuv")) c.mtl.predict_vuv = m["predict_vuv"].get<bool>();
    }
    if (j.contains("loss_weights")) {
        const auto& w = j["loss_weights"];
        reject_unknown_keys(w, {"cepstra", "logf0", "vuv"}, "wavenet config loss_weights");
        if (w.contains("cepstra")) c.loss_weights.cepstra = w["cepstra"].get<double>();
        if (w.contains("logf0")) c.loss_weights.logf0 = w["logf0"].get<double>();
        if (w.contains("vuv")) c.loss_weights.vuv = w["vuv"].get<double>();
    }
    c.validate();
    return c;
}

std::string conditioner_config_to_json(const ConditionerConfig& c) {
    json j;
    j["input_dim"] = c.input_dim;
    j["num_layers"] = c.num_layers;
    j["channels_per_direction"] = c.channels_per_direction;
    j["filter_width"] = c.filter_width;
    return j.dump();
}

ConditionerConfig conditioner_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("conditioner config: invalid JSON: ") + e.what());
    }
    reject_unknown_keys(j, {"input_dim", "num_layers", "channels_per_direction", "filter_width"},
                        "conditioner config");
    ConditionerConfig c;
    if (j.contains("input_dim")) c.input_dim = j["input_dim"].get<int>();
    if (j.contains("num_layers")) c.num_layers = j["num_layers"].get<int>();
    if (j.contains("channels_per_direction"))
        c.channels_per_direction = j["channels_per_direction"].get<int>();
    if (j.contains("filter_width")) c.filter_width = j["filter_width"].get<int>();
    return c;
}

}  // namespace mtwn
