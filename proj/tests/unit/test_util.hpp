#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "mtwn/rng.hpp"
#include "mtwn/tensor.hpp"

namespace testutil {

inline mtwn::Tensor random_tensor(mtwn::Shape shape, mtwn::Rng& rng, double scale = 1.0,
                                  bool requires_grad = false) {
    mtwn::Tensor t = mtwn::Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

inline mtwn::Tensor uniform_tensor(mtwn::Shape shape, mtwn::Rng& rng, double lo, double hi,
                                   bool requires_grad = false) {
    mtwn::Tensor t = mtwn::Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Reference causal dilated convolution written as the literal padded sum;
// independent of the library's loop structure.
inline std::vector<double> naive_conv1d_causal(const std::vector<double>& input,
                                               std::size_t c_in, std::size_t t_len,
                                               const std::vector<double>& weights,
                                               std::size_t c_out, std::size_t k_width,
                                               const std::vector<double>& bias, int dilation) {
    std::vector<double> out(c_out * t_len, 0.0);
    for (std::size_t o = 0; o < c_out; ++o) {
        for (std::size_t t = 0; t < t_len; ++t) {
            double acc = bias[o];
            for (std::size_t i = 0; i < c_in; ++i) {
                for (std::size_t k = 0; k < k_width; ++k) {
                    const long src = static_cast<long>(t) -
                                     static_cast<long>((k_width - 1 - k) * dilation);
                    if (src < 0) continue;  // left zero padding
                    acc += weights[(o * c_in + i) * k_width + k] *
                           input[i * t_len + static_cast<std::size_t>(src)];
                }
            }
            out[o * t_len + t] = acc;
        }
    }
    return out;
}

// Reference fo-pooling as the plain scalar recurrence.
inline std::vector<double> naive_fo_pool(const std::vector<double>& h_hat,
                                         const std::vector<double>& o,
                                         const std::vector<double>& f,
                                         const std::vector<double>& h0, std::size_t c_dim,
                                         std::size_t t_len) {
    std::vector<double> z(c_dim * t_len);
    for (std::size_t c = 0; c < c_dim; ++c) {
        double h = h0[c];
        for (std::size_t t = 0; t < t_len; ++t) {
            const std::size_t i = c * t_len + t;
            h = f[i] * h + (1.0 - f[i]) * h_hat[i];
            z[i] = o[i] * h;
        }
    }
    return z;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        const auto base = std::filesystem::temp_directory_path();
        static std::atomic<unsigned> counter{0};
        path_ = base / ("mtwn_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                        std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
