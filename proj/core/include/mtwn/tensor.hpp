#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mtwn/errors.hpp"

namespace mtwn {

using Shape = std::vector<std::size_t>;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation

    // Tape bookkeeping. seq == 0 marks a leaf; op outputs get the global
    // execution order number so backward can replay in exact reverse order.
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major float-64 tensor participating in a reverse-mode tape.
// Feature maps are laid out channels-first: a [C x T] tensor stores channel
// c at data()[c*T .. c*T+T). Leaf data may be mutated through data(), but
// only between graph builds (the tape reads parent buffers during backward).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<double> data, Shape shape, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t size() const;

    std::span<const double> data() const;
    std::span<double> data();
    double item() const;  // requires size() == 1

    bool requires_grad() const;
    bool on_tape() const;

    // Accumulated gradient; throws UsageError if none has been computed.
    std::span<const double> grad() const;
    Tensor grad_tensor() const;
    void zero_grad();

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor wrap_node(std::shared_ptr<detail::TensorNode>);
};

Tensor wrap_node(std::shared_ptr<detail::TensorNode> node);

// Thread-local gradient mode. Ops record tape entries only while enabled.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---- differentiable operations ----

// Causal dilated convolution: input [C_in x T], weights [C_out x C_in x K],
// bias [C_out]. The input is implicitly left-padded with (K-1)*dilation
// zeros so output length equals input length and out[:, t] never reads
// input beyond t.
Tensor conv1d_causal(const Tensor& input, const Tensor& weights, const Tensor& bias,
                     int dilation);

// Per-timestep affine map: weights [C_out x C_in], bias [C_out].
Tensor conv1x1(const Tensor& input, const Tensor& weights, const Tensor& bias);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);

// Mean over columns of -log softmax(logits[:, t])[targets[t]], stabilized by
// max subtraction. logits is [V x T], targets holds T bins in [0, V).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets);

// Mean squared error; the masked variant averages over entries with
// mask != 0 and returns 0 when the mask selects nothing.
Tensor mse(const Tensor& pred, const Tensor& target);
Tensor mse(const Tensor& pred, const Tensor& target, const Tensor& mask);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, std::size_t row_begin, std::size_t row_end);
Tensor reverse_cols(const Tensor& x);
Tensor repeat_cols(const Tensor& x, int factor);

// fo-pooling recurrence: h_t = f_t*h_{t-1} + (1-f_t)*hhat_t, z_t = o_t*h_t,
// run sequentially from t = 0 with initial state h0 [C].
Tensor fo_pool(const Tensor& h_hat, const Tensor& o, const Tensor& f, const Tensor& h0);

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable tensor with requires_grad; d(loss)/d(loss) = 1.
void backward(const Tensor& loss);

// Column-wise softmax, forward only (no tape entry).
Tensor softmax_cols(const Tensor& logits);

// Central finite differences against the tape for every coordinate of every
// param; returns the max relative error max(|g_ad - g_fd|) / max(|g_ad|,
// |g_fd|, 1e-8). fn must be deterministic and rebuild its graph per call.
double grad_check(const std::function<Tensor()>& fn, const std::vector<Tensor>& params,
                  double epsilon);

// Named trainable parameters, in collection order. Tensors share storage
// with the owning module, so optimizer updates through the map are visible.
using ParamMap = std::vector<std::pair<std::string, Tensor>>;

}  // namespace mtwn
