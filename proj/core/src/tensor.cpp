#include "mtwn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mtwn {

namespace {

thread_local std::uint64_t g_op_seq = 0;
thread_local bool g_grad_enabled = true;

std::size_t shape_product(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

using NodePtr = std::shared_ptr<detail::TensorNode>;

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape.empty()) throw ArgumentError("tensor shape must have at least one axis");
    if (shape_product(shape) != data.size())
        throw DimensionError("tensor data length does not match shape product");
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

// Registers `out` as the result of an op over `parents`. The tape entry is
// recorded only when grad mode is on and some parent wants gradients.
Tensor finish_op(NodePtr out, std::vector<NodePtr> parents,
                 std::function<void(detail::TensorNode&)> backward_fn) {
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p->requires_grad) needs = true;
    }
    if (needs) {
        out->requires_grad = true;
        out->seq = ++g_op_seq;
        out->parents = std::move(parents);
        out->backward_fn = std::move(backward_fn);
    }
    return wrap_node(std::move(out));
}

void check_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (!t.valid()) throw UsageError(std::string(what) + ": tensor is empty");
    if (t.rank() != rank)
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got " + std::to_string(t.rank()));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.valid() || !b.valid()) throw UsageError(std::string(what) + ": tensor is empty");
    if (a.shape() != b.shape()) throw DimensionError(std::string(what) + ": shape mismatch");
}

// Pointwise op with backward df expressed in terms of the output value y.
template <typename Fwd, typename Bwd>
Tensor unary_pointwise(const Tensor& x, Fwd fwd, Bwd dydx_from_y) {
    if (!x.valid()) throw UsageError("unary op: tensor is empty");
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = x.shape();
    out->data.resize(x.size());
    const auto xs = x.data();
    for (std::size_t i = 0; i < xs.size(); ++i) out->data[i] = fwd(xs[i]);
    return finish_op(out, {x.node()}, [dydx_from_y](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i)
            p.grad[i] += self.grad[i] * dydx_from_y(self.data[i], p.data[i]);
    });
}

}  // namespace

// ---- Tensor ----

Tensor wrap_node(NodePtr node) { return Tensor(std::move(node)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return wrap_node(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return wrap_node(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<double> data, Shape shape, bool requires_grad) {
    return wrap_node(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({value}, {1}, requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw UsageError("shape(): tensor is empty");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
    const auto& s = shape();
    if (i >= s.size()) throw IndexError("dim(): axis out of range");
    return s[i];
}

std::size_t Tensor::size() const {
    if (!node_) return 0;
    return node_->data.size();
}

std::span<const double> Tensor::data() const {
    if (!node_) throw UsageError("data(): tensor is empty");
    return {node_->data.data(), node_->data.size()};
}

std::span<double> Tensor::data() {
    if (!node_) throw UsageError("data(): tensor is empty");
    return {node_->data.data(), node_->data.size()};
}

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item(): tensor is not scalar");
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::on_tape() const { return node_ && node_->seq != 0; }

std::span<const double> Tensor::grad() const {
    if (!node_) throw UsageError("grad(): tensor is empty");
    if (node_->grad.size() != node_->data.size())
        throw UsageError("grad(): no gradient has been accumulated for this tensor");
    return {node_->grad.data(), node_->grad.size()};
}

Tensor Tensor::grad_tensor() const {
    auto g = grad();
    return Tensor::from_data(std::vector<double>(g.begin(), g.end()), shape());
}

void Tensor::zero_grad() {
    if (!node_) return;
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- convolutions ----

Tensor conv1d_causal(const Tensor& input, const Tensor& weights, const Tensor& bias,
                     int dilation) {
    check_rank(input, 2, "conv1d_causal input");
    check_rank(weights, 3, "conv1d_causal weights");
    check_rank(bias, 1, "conv1d_causal bias");
    const std::size_t c_in = input.dim(0), t_len = input.dim(1);
    const std::size_t c_out = weights.dim(0), k_width = weights.dim(2);
    if (weights.dim(1) != c_in)
        throw DimensionError("conv1d_causal: weights C_in " + std::to_string(weights.dim(1)) +
                             " does not match input channels " + std::to_string(c_in));
    if (bias.dim(0) != c_out) throw DimensionError("conv1d_causal: bias length != C_out");
    if (k_width < 1) throw ArgumentError("conv1d_causal: filter width must be >= 1");
    if (dilation < 1) throw ArgumentError("conv1d_causal: dilation must be >= 1");

    auto out = std::make_shared<detail::TensorNode>();
    out->shape = {c_out, t_len};
    out->data.resize(c_out * t_len);
    const auto xs = input.data();
    const auto ws = weights.data();
    const auto bs = bias.data();
    for (std::size_t o = 0; o < c_out; ++o) {
        double* dst = out->data.data() + o * t_len;
        std::fill(dst, dst + t_len, bs[o]);
        for (std::size_t i = 0; i < c_in; ++i) {
            const double* src = xs.data() + i * t_len;
            for (std::size_t k = 0; k < k_width; ++k) {
                const std::size_t offset = (k_width - 1 - k) * static_cast<std::size_t>(dilation);
                if (offset >= t_len && t_len > 0) continue;
                const double w = ws[(o * c_in + i) * k_width + k];
                if (w == 0.0) continue;
                for (std::size_t t = offset; t < t_len; ++t) dst[t] += w * src[t - offset];
            }
        }
    }

    const std::size_t d = static_cast<std::size_t>(dilation);
    return finish_op(
        out, {input.node(), weights.node(), bias.node()},
        [c_in, c_out, k_width, t_len, d](detail::TensorNode& self) {
            auto& in_n = *self.parents[0];
            auto& w_n = *self.parents[1];
            auto& b_n = *self.parents[2];
            const double* gout = self.grad.data();
            if (b_n.requires_grad) {
                b_n.ensure_grad();
                for (std::size_t o = 0; o < c_out; ++o) {
                    double acc = 0.0;
                    const double* g = gout + o * t_len;
                    for (std::size_t t = 0; t < t_len; ++t) acc += g[t];
                    b_n.grad[o] += acc;
                }
            }
            if (w_n.requires_grad) {
                w_n.ensure_grad();
                for (std::size_t o = 0; o < c_out; ++o) {
                    const double* g = gout + o * t_len;
                    for (std::size_t i = 0; i < c_in; ++i) {
                        const double* src = in_n.data.data() + i * t_len;
                        for (std::size_t k = 0; k < k_width; ++k) {
                            const std::size_t offset = (k_width - 1 - k) * d;
                            if (offset >= t_len && t_len > 0) continue;
                            double acc = 0.0;
                            for (std::size_t t = offset; t < t_len; ++t)
                                acc += g[t] * src[t - offset];
                            w_n.grad[(o * c_in + i) * k_width + k] += acc;
                        }
                    }
                }
            }
            if (in_n.requires_grad) {
                in_n.ensure_grad();
                for (std::size_t o = 0; o < c_out; ++o) {
                    const double* g = gout + o * t_len;
                    for (std::size_t i = 0; i < c_in; ++i) {
                        double* gin = in_n.grad.data() + i * t_len;
                        for (std::size_t k = 0; k < k_width; ++k) {
                            const std::size_t offset = (k_width - 1 - k) * d;
                            if (offset >= t_len && t_len > 0) continue;
                            const double w = w_n.data[(o * c_in + i) * k_width + k];
                            if (w == 0.0) continue;
                            for (std::size_t t = offset; t < t_len; ++t)
                                gin[t - offset] += w * g[t];
                        }
                    }
                }
            }
        });
}

Tensor conv1x1(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    check_rank(input, 2, "conv1x1 input");
    check_rank(weights, 2, "conv1x1 weights");
    check_rank(bias, 1, "conv1x1 bias");
    const std::size_t c_in = input.dim(0), t_len = input.dim(1);
    const std::size_t c_out = weights.dim(0);
    if (weights.dim(1) != c_in)
        throw DimensionError("conv1x1: weights C_in " + std::to_string(weights.dim(1)) +
                             " does not match input channels " + std::to_string(c_in));
    if (bias.dim(0) != c_out) throw DimensionError("conv1x1: bias length != C_out");

    auto out = std::make_shared<detail::TensorNode>();
    out->shape = {c_out, t_len};
    out->data.resize(c_out * t_len);
    const auto xs = input.data();
    const auto ws = weights.data();
    const auto bs = bias.data();
    for (std::size_t o = 0; o < c_out; ++o) {
        double* dst = out->data.data() + o * t_len;
        std::fill(dst, dst + t_len, bs[o]);
        for (std::size_t i = 0; i < c_in; ++i) {
            const double w = ws[o * c_in + i];
            if (w == 0.0) continue;
            const double* src = xs.data() + i * t_len;
            for (std::size_t t = 0; t < t_len; ++t) dst[t] += w * src[t];
        }
    }

    return finish_op(out, {input.node(), weights.node(), bias.node()},
                     [c_in, c_out, t_len](detail::TensorNode& self) {
                         auto& in_n = *self.parents[0];
                         auto& w_n = *self.parents[1];
                         auto& b_n = *self.parents[2];
                         const double* gout = self.grad.data();
                         if (b_n.requires_grad) {
                             b_n.ensure_grad();
                             for (std::size_t o = 0; o < c_out; ++o) {
                                 double acc = 0.0;
                                 const double* g = gout + o * t_len;
                                 for (std::size_t t = 0; t < t_len; ++t) acc += g[t];
                                 b_n.grad[o] += acc;
                             }
                         }
                         if (w_n.requires_grad) {
                             w_n.ensure_grad();
                             for (std::size_t o = 0; o < c_out; ++o) {
                                 const double* g = gout + o * t_len;
                                 for (std::size_t i = 0; i < c_in; ++i) {
                                     const double* src = in_n.data.data() + i * t_len;
                                     double acc = 0.0;
                                     for (std::size_t t = 0; t < t_len; ++t) acc += g[t] * src[t];
                                     w_n.grad[o * c_in + i] += acc;
                                 }
                             }
                         }
                         if (in_n.requires_grad) {
                             in_n.ensure_grad();
                             for (std::size_t o = 0; o < c_out; ++o) {
                                 const double* g = gout + o * t_len;
                                 for (std::size_t i = 0; i < c_in; ++i) {
                                     const double w = w_n.data[o * c_in + i];
                                     if (w == 0.0) continue;
                                     double* gin = in_n.grad.data() + i * t_len;
                                     for (std::size_t t = 0; t < t_len; ++t) gin[t] += w * g[t];
                                 }
                             }
                         }
                     });
}

// ---- pointwise ----

Tensor tanh(const Tensor& x) {
    return unary_pointwise(
        x, [](double v) { return std::tanh(v); },
        [](double y, double) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_pointwise(
        x,
        [](double v) {
            // Evaluated in the stable half for each sign.
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double y, double) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary_pointwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double, double xin) { return xin > 0.0 ? 1.0 : 0.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = a.shape();
    out->data.resize(a.size());
    const auto as = a.data();
    const auto bs = b.data();
    for (std::size_t i = 0; i < as.size(); ++i) out->data[i] = as[i] * bs[i];
    return finish_op(out, {a.node(), b.node()}, [](detail::TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.data.size(); ++i)
                pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.data.size(); ++i)
                pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = a.shape();
    out->data.resize(a.size());
    const auto as = a.data();
    const auto bs = b.data();
    for (std::size_t i = 0; i < as.size(); ++i) out->data[i] = as[i] + bs[i];
    return finish_op(out, {a.node(), b.node()}, [](detail::TensorNode& self) {
        for (auto& parent : self.parents) {
            if (!parent->requires_grad) continue;
            parent->ensure_grad();
            for (std::size_t i = 0; i < self.data.size(); ++i)
                parent->grad[i] += self.grad[i];
        }
    });
}

Tensor scale(const Tensor& x, double factor) {
    if (!x.valid()) throw UsageError("scale: tensor is empty");
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = x.shape();
    out->data.resize(x.size());
    const auto xs = x.data();
    for (std::size_t i = 0; i < xs.size(); ++i) out->data[i] = xs[i] * factor;
    return finish_op(out, {x.node()}, [factor](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i) p.grad[i] += self.grad[i] * factor;
    });
}

Tensor sum(const Tensor& x) {
    if (!x.valid()) throw UsageError("sum: tensor is empty");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = {1};
    out->data = {acc};
    return finish_op(out, {x.node()}, [](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double g = self.grad[0];
        for (std::size_t i = 0; i < p.data.size(); ++i) p.grad[i] += g;
    });
}

// ---- losses ----

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    check_rank(logits, 2, "softmax_cross_entropy logits");
    const std::size_t v_dim = logits.dim(0), t_len = logits.dim(1);
    if (targets.size() != t_len)
        throw DimensionError("softmax_cross_entropy: targets length != logits T");
    if (t_len == 0) throw ArgumentError("softmax_cross_entropy: empty sequence");
    for (int b : targets)
        if (b < 0 || static_cast<std::size_t>(b) >= v_dim)
            throw IndexError("softmax_cross_entropy: target bin " + std::to_string(b) +
                             " out of range [0, " + std::to_string(v_dim) + ")");

    const auto ls = logits.data();
    // Cache softmax probabilities for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(v_dim * t_len);
    double loss = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < v_dim; ++v) m = std::max(m, ls[v * t_len + t]);
        double z = 0.0;
        for (std::size_t v = 0; v < v_dim; ++v) {
            const double e = std::exp(ls[v * t_len + t] - m);
            (*probs)[v * t_len + t] = e;
            z += e;
        }
        const double inv_z = 1.0 / z;
        for (std::size_t v = 0; v < v_dim; ++v) (*probs)[v * t_len + t] *= inv_z;
        loss += (m + std::log(z)) - ls[static_cast<std::size_t>(targets[t]) * t_len + t];
    }
    loss /= static_cast<double>(t_len);

    auto out = std::make_shared<detail::TensorNode>();
    out->shape = {1};
    out->data = {loss};
    auto targets_copy = std::make_shared<std::vector<int>>(targets);
    return finish_op(out, {logits.node()},
                     [probs, targets_copy, v_dim, t_len](detail::TensorNode& self) {
                         auto& p = *self.parents[0];
                         if (!p.requires_grad) return;
                         p.ensure_grad();
                         const double g = self.grad[0] / static_cast<double>(t_len);
                         for (std::size_t v = 0; v < v_dim; ++v) {
                             for (std::size_t t = 0; t < t_len; ++t) {
                                 double d = (*probs)[v * t_len + t];
                                 if (static_cast<std::size_t>((*targets_copy)[t]) == v) d -= 1.0;
                                 p.grad[v * t_len + t] += g * d;
                             }
                         }
                     });
}

namespace {

Tensor mse_impl(const Tensor& pred, const Tensor& target, const Tensor* mask) {
    check_same_shape(pred, target, "mse");
    if (mask) check_same_shape(pred, *mask, "mse mask");
    const auto ps = pred.data();
    const auto ts = target.data();
    double count = 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const double m = mask ? (*mask).data()[i] : 1.0;
        if (m == 0.0) continue;
        const double d = ps[i] - ts[i];
        acc += d * d;
        count += 1.0;
    }
    if (count == 0.0) return Tensor::scalar(0.0);  // empty-mean convention; no grad flows
    const double loss = acc / count;

    auto out = std::make_shared<detail::TensorNode>();
    out->shape = {1};
    out->data = {loss};
    std::vector<NodePtr> parents = {pred.node(), target.node()};
    std::shared_ptr<detail::TensorNode> mask_node = mask ? mask->node() : nullptr;
    return finish_op(out, std::move(parents), [mask_node, count](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        auto& t = *self.parents[1];
        const double g = self.grad[0] * 2.0 / count;
        if (p.requires_grad) p.ensure_grad();
        if (t.requires_grad) t.ensure_grad();
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double m = mask_node ? mask_node->data[i] : 1.0;
            if (m == 0.0) continue;
            const double d = g * (p.data[i] - t.data[i]);
            if (p.requires_grad) p.grad[i] += d;
            if (t.requires_grad) t.grad[i] -= d;
        }
    });
}

}  // namespace

Tensor mse(const Tensor& pred, const Tensor& target) { return mse_impl(pred, target, nullptr); }

Tensor mse(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    return mse_impl(pred, target, &mask);
}

// ---- structural ops ----

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check_rank(a, 2, "concat_rows a");
    check_rank(b, 2, "concat_rows b");
    if (a.dim(1) != b.dim(1)) throw DimensionError("concat_rows: column counts differ");
    const std::size_t ca = a.dim(0), cb = b.dim(0), t_len = a.dim(1);
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = {ca + cb, t_len};
    out->data.resize((ca + cb) * t_len);
    std::copy(a.data().begin(), a.data().end(), out->data.begin());
    std::copy(b.data().begin(), b.data().end(), out->data.begin() + ca * t_len);
    return finish_op(out, {a.node(), b.node()}, [ca, t_len](detail::TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < pa.data.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            const std::size_t off = ca * t_len;
            for (std::size_t i = 0; i < pb.data.size(); ++i) pb.grad[i] += self.grad[off + i];
        }
    });
}

Tensor slice_rows(const Tensor& x, std::size_t row_begin, std::size_t row_end) {
    check_rank(x, 2, "slice_rows");
    if (row_begin >= row_end || row_end > x.dim(0))
        throw IndexError("slice_rows: invalid row range");
    const std::size_t t_len = x.dim(1), rows = row_end - row_begin;
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = {rows, t_len};
    out->data.assign(x.data().begin() + row_begin * t_len, x.data().begin() + row_end * t_len);
    return finish_op(out, {x.node()}, [row_begin, t_len](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::size_t off = row_begin * t_len;
        for (std::size_t i = 0; i < self.data.size(); ++i) p.grad[off + i] += self.grad[i];
    });
}

Tensor reverse_cols(const Tensor& x) {
    check_rank(x, 2, "reverse_cols");
    const std::size_t c_dim = x.dim(0), t_len = x.dim(1);
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = x.shape();
    out->data.resize(x.size());
    const auto xs = x.data();
    for (std::size_t c = 0; c < c_dim; ++c)
        for (std::size_t t = 0; t < t_len; ++t)
            out->data[c * t_len + t] = xs[c * t_len + (t_len - 1 - t)];
    return finish_op(out, {x.node()}, [c_dim, t_len](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t c = 0; c < c_dim; ++c)
            for (std::size_t t = 0; t < t_len; ++t)
                p.grad[c * t_len + (t_len - 1 - t)] += self.grad[c * t_len + t];
    });
}

Tensor repeat_cols(const Tensor& x, int factor) {
    check_rank(x, 2, "repeat_cols");
    if (factor < 1) throw ArgumentError("repeat_cols: factor must be >= 1");
    const std::size_t c_dim = x.dim(0), f_len = x.dim(1);
    const std::size_t r = static_cast<std::size_t>(factor);
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = {c_dim, f_len * r};
    out->data.resize(c_dim * f_len * r);
    const auto xs = x.data();
    for (std::size_t c = 0; c < c_dim; ++c) {
        double* dst = out->data.data() + c * f_len * r;
        const double* src = xs.data() + c * f_len;
        for (std::size_t f = 0; f < f_len; ++f)
            for (std::size_t j = 0; j < r; ++j) dst[f * r + j] = src[f];
    }
    return finish_op(out, {x.node()}, [c_dim, f_len, r](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t c = 0; c < c_dim; ++c) {
            const double* g = self.grad.data() + c * f_len * r;
            double* dst = p.grad.data() + c * f_len;
            for (std::size_t f = 0; f < f_len; ++f) {
                double acc = 0.0;
                for (std::size_t j = 0; j < r; ++j) acc += g[f * r + j];
                dst[f] += acc;
            }
        }
    });
}

Tensor fo_pool(const Tensor& h_hat, const Tensor& o, const Tensor& f, const Tensor& h0) {
    check_rank(h_hat, 2, "fo_pool h_hat");
    check_same_shape(h_hat, o, "fo_pool");
    check_same_shape(h_hat, f, "fo_pool");
    check_rank(h0, 1, "fo_pool h0");
    const std::size_t c_dim = h_hat.dim(0), t_len = h_hat.dim(1);
    if (h0.dim(0) != c_dim) throw DimensionError("fo_pool: h0 length != channels");

    // Keep the full state trajectory; the backward pass walks it in reverse.
    auto states = std::make_shared<std::vector<double>>(c_dim * t_len);
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = h_hat.shape();
    out->data.resize(c_dim * t_len);
    const auto hh = h_hat.data();
    const auto os = o.data();
    const auto fs = f.data();
    const auto h0s = h0.data();
    for (std::size_t c = 0; c < c_dim; ++c) {
        double state = h0s[c];
        const std::size_t base = c * t_len;
        for (std::size_t t = 0; t < t_len; ++t) {
            const double ft = fs[base + t];
            state = ft * state + (1.0 - ft) * hh[base + t];
            (*states)[base + t] = state;
            out->data[base + t] = os[base + t] * state;
        }
    }

    return finish_op(
        out, {h_hat.node(), o.node(), f.node(), h0.node()},
        [states, c_dim, t_len](detail::TensorNode& self) {
            auto& hh_n = *self.parents[0];
            auto& o_n = *self.parents[1];
            auto& f_n = *self.parents[2];
            auto& h0_n = *self.parents[3];
            if (hh_n.requires_grad) hh_n.ensure_grad();
            if (o_n.requires_grad) o_n.ensure_grad();
            if (f_n.requires_grad) f_n.ensure_grad();
            if (h0_n.requires_grad) h0_n.ensure_grad();
            for (std::size_t c = 0; c < c_dim; ++c) {
                const std::size_t base = c * t_len;
                double carry = 0.0;  // dL/dh_t flowing backwards
                for (std::size_t t = t_len; t-- > 0;) {
                    const double gz = self.grad[base + t];
                    const double h_t = (*states)[base + t];
                    const double h_prev = t > 0 ? (*states)[base + t - 1] : h0_n.data[c];
                    if (o_n.requires_grad) o_n.grad[base + t] += gz * h_t;
                    const double dh = gz * o_n.data[base + t] + carry;
                    const double ft = f_n.data[base + t];
                    if (f_n.requires_grad)
                        f_n.grad[base + t] += dh * (h_prev - hh_n.data[base + t]);
                    if (hh_n.requires_grad) hh_n.grad[base + t] += dh * (1.0 - ft);
                    carry = dh * ft;
                }
                if (h0_n.requires_grad) h0_n.grad[c] += carry;
            }
        });
}

// ---- backward ----

void backward(const Tensor& loss) {
    if (!loss.valid()) throw UsageError("backward: tensor is empty");
    if (loss.size() != 1) throw DimensionError("backward: loss must be scalar");
    auto root = loss.node();
    if (root->seq == 0)
        throw UsageError("backward: tensor was not produced by an op on an active tape");

    // Collect reachable op nodes; replay strictly in reverse execution order.
    std::vector<detail::TensorNode*> ops;
    std::vector<detail::TensorNode*> stack = {root.get()};
    std::vector<detail::TensorNode*> visited;
    visited.reserve(256);
    auto visit = [&visited](detail::TensorNode* n) {
        auto it = std::lower_bound(visited.begin(), visited.end(), n);
        if (it != visited.end() && *it == n) return false;
        visited.insert(it, n);
        return true;
    };
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        if (!visit(n)) continue;
        if (n->seq != 0) {
            ops.push_back(n);
            for (auto& p : n->parents) stack.push_back(p.get());
        }
    }
    std::sort(ops.begin(), ops.end(),
              [](const detail::TensorNode* a, const detail::TensorNode* b) {
                  return a->seq > b->seq;
              });

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto* op : ops) {
        op->ensure_grad();  // ops touched only via untraversed paths still get a buffer
        op->backward_fn(*op);
    }
}

Tensor softmax_cols(const Tensor& logits) {
    check_rank(logits, 2, "softmax_cols");
    NoGradGuard ng;
    const std::size_t v_dim = logits.dim(0), t_len = logits.dim(1);
    Tensor out = Tensor::zeros({v_dim, t_len});
    const auto ls = logits.data();
    auto os = out.data();
    for (std::size_t t = 0; t < t_len; ++t) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < v_dim; ++v) m = std::max(m, ls[v * t_len + t]);
        double z = 0.0;
        for (std::size_t v = 0; v < v_dim; ++v) {
            const double e = std::exp(ls[v * t_len + t] - m);
            os[v * t_len + t] = e;
            z += e;
        }
        for (std::size_t v = 0; v < v_dim; ++v) os[v * t_len + t] /= z;
    }
    return out;
}

double grad_check(const std::function<Tensor()>& fn, const std::vector<Tensor>& params,
                  double epsilon) {
    if (epsilon <= 0.0) throw ArgumentError("grad_check: epsilon must be > 0");

    for (auto p : params) p.zero_grad();
    Tensor loss = fn();
    if (loss.size() != 1) throw DimensionError("grad_check: fn must return a scalar");
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: fn returned non-finite value");
    backward(loss);

    std::vector<std::vector<double>> ad_grads;
    ad_grads.reserve(params.size());
    for (const auto& p : params) {
        if (p.node()->grad.size() == p.size()) {
            auto g = p.grad();
            ad_grads.emplace_back(g.begin(), g.end());
        } else {
            ad_grads.emplace_back(p.size(), 0.0);  // unreached params have zero gradient
        }
    }

    double max_rel = 0.0;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        auto buf = p.data();
        for (std::size_t i = 0; i < buf.size(); ++i) {
            const double saved = buf[i];
            buf[i] = saved + epsilon;
            const double f_plus = fn().item();
            buf[i] = saved - epsilon;
            const double f_minus = fn().item();
            buf[i] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
                throw NumericError("grad_check: fn returned non-finite value during probing");
            const double g_fd = (f_plus - f_minus) / (2.0 * epsilon);
            const double g_ad = ad_grads[pi][i];
            const double denom = std::max({std::abs(g_ad), std::abs(g_fd), 1e-8});
            max_rel = std::max(max_rel, std::abs(g_ad - g_fd) / denom);
        }
    }
    return max_rel;
}

}  // namespace mtwn
