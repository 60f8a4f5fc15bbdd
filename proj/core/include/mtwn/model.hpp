#pragma once

#include <string>
#include <vector>

#include "mtwn/conditioner.hpp"
#include "mtwn/rng.hpp"
#include "mtwn/tensor.hpp"

namespace mtwn {

struct MtlConfig {
    int n_cepstra = 25;
    bool predict_logf0 = true;
    bool predict_vuv = true;

    int output_dim() const {
        return n_cepstra + (predict_logf0 ? 1 : 0) + (predict_vuv ? 1 : 0);
    }
};

struct LossWeights {
    double cepstra = 1.0;
    double logf0 = 1.0;
    double vuv = 1.0;
};

struct WaveNetConfig {
    int num_stacks = 4;
    int layers_per_stack = 10;
    int filter_width = 2;
    int residual_channels = 32;
    int skip_channels = 64;
    int gate_channels = 32;
    int condition_dim = 128;
    int quantization_levels = 256;
    MtlConfig mtl;
    LossWeights loss_weights;

    int total_layers() const { return num_stacks * layers_per_stack; }
    // Dilations cycle 1, 2, ..., 2^(layers_per_stack-1) within each stack.
    std::vector<int> dilations() const;
    void validate() const;

    // Desk-scale default: 2 stacks x 6 layers (max dilation 32, N = 127),
    // 32 residual / 32 gate / 64 skip channels.
    static WaveNetConfig desk_default();
};

// N = 1 + (filter_width - 1) * sum of all dilations.
int receptive_field(const WaveNetConfig& config);

// One dilated residual block: gated activation with per-block condition
// projections, plus residual and skip 1x1 convolutions.
struct ResidualBlock {
    Tensor conv_filter_w, conv_filter_b;  // [G x R x K], [G]
    Tensor conv_gate_w, conv_gate_b;      // [G x R x K], [G]
    Tensor cond_filter_w;                 // [G x D_enc] (1x1, no bias)
    Tensor cond_gate_w;                   // [G x D_enc]
    Tensor res_w, res_b;                  // [R x G], [R]
    Tensor skip_w, skip_b;                // [S x G], [S]
    int dilation = 1;

    static ResidualBlock init(const WaveNetConfig& config, int dilation, Rng& rng);
    void collect_params(ParamMap& params, const std::string& prefix) const;
};

struct BlockOutput {
    Tensor residual;  // [R x T]
    Tensor skip;      // [S x T]
};

// g = tanh(dilconv_f(h) + proj_f(c)) * sigmoid(dilconv_g(h) + proj_g(c));
// residual_out = h + res_1x1(g); skip_out = skip_1x1(g).
BlockOutput residual_block_forward(const ResidualBlock& block, const Tensor& h, const Tensor& c);

struct SecondaryPrediction {
    Tensor cepstra;  // [n_cepstra x F]
    Tensor logf0;    // [1 x F], invalid when disabled
    Tensor vuv;      // [1 x F] in (0,1) via sigmoid, invalid when disabled
};

// Frame-level secondary head: one linear projection of the shared frame
// encoding, split into cepstra / log F0 / V-UV rows.
struct MTLHead {
    Tensor w;  // [output_dim x D_enc]
    Tensor b;  // [output_dim]
    MtlConfig mtl;

    static MTLHead init(const WaveNetConfig& config, Rng& rng);
    void collect_params(ParamMap& params, const std::string& prefix) const;
};

SecondaryPrediction mtl_head_forward(const MTLHead& head, const Tensor& frame_encoding);

// Sample-level network. Position t of the logits sees waveform samples
// strictly before t (inputs are shifted right by one inside forward(), the
// first position receiving the mu-law bin of silence, 128).
struct WaveNet {
    WaveNetConfig config;
    Tensor input_w, input_b;  // 1x1 embedding from one-hot to residual channels
    std::vector<ResidualBlock> blocks;
    Tensor post1_w, post1_b;  // [S x S]
    Tensor post2_w, post2_b;  // [256 x S]; zero-initialized so step-0 CE is ln 256

    static WaveNet init(const WaveNetConfig& config, Rng& rng);

    // Teacher-forcing logits for target sequence x: [256 x T].
    Tensor forward(const Tensor& x_onehot, const Tensor& c_samples) const;

    // Logits from already-shifted inputs u (u[:, t] is the one-hot of the
    // sample preceding t). Shared by forward() and incremental generation.
    Tensor forward_inputs(const Tensor& u_onehot, const Tensor& c_samples) const;

    void collect_params(ParamMap& params, const std::string& prefix) const;
};

// Prepends a bin-128 one-hot column and drops the last column.
Tensor shift_right_one_hot(const Tensor& x_onehot);

// JSON (de)serialization for config echo in checkpoints and config files.
std::string wavenet_config_to_json(const WaveNetConfig& config);
WaveNetConfig wavenet_config_from_json(const std::string& json_text);
std::string conditioner_config_to_json(const ConditionerConfig& config);
ConditionerConfig conditioner_config_from_json(const std::string& json_text);

}  // namespace mtwn
