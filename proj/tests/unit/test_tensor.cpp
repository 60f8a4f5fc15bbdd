#include <doctest.h>

#include <cmath>

#include "mtwn/tensor.hpp"
#include "test_util.hpp"

using namespace mtwn;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::uniform_tensor;

namespace {
const double kLn256 = std::log(256.0);
}

TEST_CASE("conv1d_causal identity kernel selects the current sample") {
    Tensor x = Tensor::from_data({1, 2, 3, 4}, {1, 4});
    Tensor w = Tensor::from_data({0, 1}, {1, 1, 2});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv1d_causal(x, w, b, 1);
    CHECK(y.data()[0] == 1.0);
    CHECK(y.data()[1] == 2.0);
    CHECK(y.data()[2] == 3.0);
    CHECK(y.data()[3] == 4.0);
}

TEST_CASE("conv1d_causal dilation 2 sums x[t-2] + x[t] with zero padding") {
    Tensor x = Tensor::from_data({1, 2, 3, 4}, {1, 4});
    Tensor w = Tensor::from_data({1, 1}, {1, 1, 2});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv1d_causal(x, w, b, 2);
    CHECK(y.data()[0] == 1.0);
    CHECK(y.data()[1] == 2.0);
    CHECK(y.data()[2] == 4.0);
    CHECK(y.data()[3] == 6.0);
}

TEST_CASE("conv1d_causal zero weights give a constant bias output") {
    Rng rng(1);
    Tensor x = random_tensor({3, 7}, rng);
    Tensor w = Tensor::zeros({2, 3, 2});
    Tensor b = Tensor::from_data({4.0, -2.5}, {2});
    Tensor y = conv1d_causal(x, w, b, 4);
    for (std::size_t t = 0; t < 7; ++t) {
        CHECK(y.data()[t] == 4.0);
        CHECK(y.data()[7 + t] == -2.5);
    }
}

TEST_CASE("conv1d_causal rejects channel mismatch") {
    Tensor x = Tensor::zeros({3, 5});
    Tensor w = Tensor::zeros({2, 4, 2});
    Tensor b = Tensor::zeros({2});
    CHECK_THROWS_AS(conv1d_causal(x, w, b, 1), DimensionError);
    Tensor w_ok = Tensor::zeros({2, 3, 2});
    CHECK_THROWS_AS(conv1d_causal(x, w_ok, b, 0), ArgumentError);
}

TEST_CASE("conv1d_causal matches the naive padded-sum oracle") {
    Rng rng(42);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t c_in = 1 + rng.uniform_index(4);
        const std::size_t c_out = 1 + rng.uniform_index(4);
        const std::size_t k = 1 + rng.uniform_index(3);
        const std::size_t t_len = 3 + rng.uniform_index(20);
        const int dilation = 1 + static_cast<int>(rng.uniform_index(4));
        Tensor x = random_tensor({c_in, t_len}, rng);
        Tensor w = random_tensor({c_out, c_in, k}, rng);
        Tensor b = random_tensor({c_out}, rng);
        Tensor y = conv1d_causal(x, w, b, dilation);
        const auto oracle = testutil::naive_conv1d_causal(
            {x.data().begin(), x.data().end()}, c_in, t_len,
            {w.data().begin(), w.data().end()}, c_out, k, {b.data().begin(), b.data().end()},
            dilation);
        CHECK(max_abs_diff(y.data(), oracle) < 1e-12);
    }
}

TEST_CASE("conv1d_causal causality: future samples never leak backwards") {
    Rng rng(3);
    Tensor w = random_tensor({2, 2, 3}, rng);
    Tensor b = random_tensor({2}, rng);
    Tensor x = random_tensor({2, 24}, rng);
    Tensor y = conv1d_causal(x, w, b, 2);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t t = rng.uniform_index(23);
        const std::size_t t_future = t + 1 + rng.uniform_index(24 - t - 1);
        Tensor x2 = Tensor::from_data({x.data().begin(), x.data().end()}, x.shape());
        for (std::size_t c = 0; c < 2; ++c) x2.data()[c * 24 + t_future] += rng.normal();
        Tensor y2 = conv1d_causal(x2, w, b, 2);
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t s = 0; s <= t; ++s)
                CHECK(y.data()[c * 24 + s] == y2.data()[c * 24 + s]);  // bit-identical
    }
}

TEST_CASE("conv1d_causal is linear in its input (zero bias)") {
    Rng rng(5);
    Tensor w = random_tensor({3, 2, 2}, rng);
    Tensor b = Tensor::zeros({3});
    Tensor x = random_tensor({2, 16}, rng);
    Tensor y = random_tensor({2, 16}, rng);
    const double a = 1.7, c = -0.6;
    Tensor mix = Tensor::zeros({2, 16});
    for (std::size_t i = 0; i < mix.size(); ++i)
        mix.data()[i] = a * x.data()[i] + c * y.data()[i];
    Tensor lhs = conv1d_causal(mix, w, b, 3);
    Tensor fx = conv1d_causal(x, w, b, 3);
    Tensor fy = conv1d_causal(y, w, b, 3);
    for (std::size_t i = 0; i < lhs.size(); ++i)
        CHECK(std::abs(lhs.data()[i] - (a * fx.data()[i] + c * fy.data()[i])) < 1e-10);
}

TEST_CASE("conv1x1 examples") {
    SUBCASE("identity weights, zero bias") {
        Tensor x = Tensor::from_data({1, 2, 3, 4, 5, 6}, {2, 3});
        Tensor w = Tensor::from_data({1, 0, 0, 1}, {2, 2});
        Tensor b = Tensor::zeros({2});
        Tensor y = conv1x1(x, w, b);
        CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
    }
    SUBCASE("affine map w=2, b=1") {
        Tensor x = Tensor::from_data({1, 2, 3}, {1, 3});
        Tensor y = conv1x1(x, Tensor::from_data({2}, {1, 1}), Tensor::from_data({1}, {1}));
        CHECK(y.data()[0] == 3.0);
        CHECK(y.data()[1] == 5.0);
        CHECK(y.data()[2] == 7.0);
    }
    SUBCASE("zero weights yield constant bias") {
        Tensor x = Tensor::from_data({9, 9, 9}, {1, 3});
        Tensor y = conv1x1(x, Tensor::zeros({1, 1}), Tensor::from_data({-3}, {1}));
        for (double v : y.data()) CHECK(v == -3.0);
    }
    SUBCASE("dimension error") {
        CHECK_THROWS_AS(conv1x1(Tensor::zeros({2, 3}), Tensor::zeros({1, 3}), Tensor::zeros({1})),
                        DimensionError);
    }
}

TEST_CASE("conv1x1 equals conv1d_causal at K=1 exactly") {
    Rng rng(8);
    Tensor x = random_tensor({4, 10}, rng);
    Tensor w = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor w3 = Tensor::from_data({w.data().begin(), w.data().end()}, {3, 4, 1});
    Tensor via_1x1 = conv1x1(x, w, b);
    Tensor via_conv = conv1d_causal(x, w3, b, 1);
    CHECK(max_abs_diff(via_1x1.data(), via_conv.data()) == 0.0);
}

TEST_CASE("elementwise examples") {
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    CHECK(tanh(Tensor::scalar(0.0)).item() == 0.0);
    Tensor p = mul(Tensor::from_data({1, 2}, {2}), Tensor::from_data({3, 4}, {2}));
    CHECK(p.data()[0] == 3.0);
    CHECK(p.data()[1] == 8.0);
    CHECK_THROWS_AS(mul(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({2, 1})), DimensionError);
}

TEST_CASE("softmax_cross_entropy analytic anchors") {
    SUBCASE("uniform logits give ln 256") {
        Tensor logits = Tensor::zeros({256, 3});
        Tensor loss = softmax_cross_entropy(logits, {0, 100, 255});
        CHECK(loss.item() == doctest::Approx(kLn256).epsilon(1e-12));
    }
    SUBCASE("saturated correct class gives ~0") {
        Tensor logits = Tensor::zeros({256, 1});
        logits.data()[7] = 1000.0;
        CHECK(softmax_cross_entropy(logits, {7}).item() == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("mean of perfect and uniform is ln(256)/2") {
        Tensor logits = Tensor::zeros({256, 2});
        logits.data()[9 * 2 + 0] = 1000.0;  // column 0 perfect on bin 9
        Tensor loss = softmax_cross_entropy(logits, {9, 42});
        CHECK(loss.item() == doctest::Approx(kLn256 / 2).epsilon(1e-9));
    }
    SUBCASE("target bin out of range") {
        Tensor logits = Tensor::zeros({256, 1});
        CHECK_THROWS_AS(softmax_cross_entropy(logits, {256}), IndexError);
        CHECK_THROWS_AS(softmax_cross_entropy(logits, {-1}), IndexError);
    }
}

TEST_CASE("softmax columns sum to one within 1e-12") {
    Rng rng(11);
    Tensor logits = random_tensor({256, 5}, rng, 4.0);
    Tensor probs = softmax_cols(logits);
    for (std::size_t t = 0; t < 5; ++t) {
        double s = 0.0;
        for (std::size_t v = 0; v < 256; ++v) s += probs.data()[v * 5 + t];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("mse examples") {
    Tensor a = Tensor::from_data({1, 3}, {2});
    CHECK(mse(a, a).item() == 0.0);
    CHECK(mse(Tensor::from_data({0, 0}, {2}), a).item() == 5.0);
    Tensor none = Tensor::zeros({2});
    CHECK(mse(Tensor::from_data({0, 0}, {2}), a, none).item() == 0.0);  // empty-mean convention
    CHECK_THROWS_AS(mse(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
    SUBCASE("mask selects entries") {
        Tensor pred = Tensor::from_data({0, 0, 0}, {3});
        Tensor target = Tensor::from_data({2, 5, 4}, {3});
        Tensor mask = Tensor::from_data({1, 0, 1}, {3});
        CHECK(mse(pred, target, mask).item() == doctest::Approx(10.0));  // (4 + 16) / 2
    }
}

TEST_CASE("backward basics") {
    SUBCASE("grad of sum is all ones") {
        Rng rng(2);
        Tensor x = random_tensor({3, 4}, rng, 1.0, true);
        backward(sum(x));
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    SUBCASE("d/dw mse(w*1, 0) at w=3 is 6") {
        Tensor w = Tensor::scalar(3.0, true);
        Tensor loss = mse(w, Tensor::scalar(0.0));
        backward(loss);
        CHECK(w.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
    }
    SUBCASE("independent graphs produce independent gradients") {
        Tensor x = Tensor::scalar(2.0, true);
        backward(mse(x, Tensor::scalar(0.0)));
        const double g1 = x.grad()[0];
        Tensor y = Tensor::scalar(2.0, true);
        backward(sum(y));
        CHECK(x.grad()[0] == g1);  // untouched by the second tape
        CHECK(y.grad()[0] == 1.0);
    }
    SUBCASE("backward on a leaf is a usage error") {
        Tensor x = Tensor::scalar(1.0, true);
        CHECK_THROWS_AS(backward(x), UsageError);
    }
    SUBCASE("backward requires a scalar") {
        Tensor x = Tensor::zeros({2}, true);
        CHECK_THROWS_AS(backward(add(x, x)), DimensionError);
    }
}

TEST_CASE("grad_check: sum of squares") {
    Rng rng(4);
    Tensor x = random_tensor({7}, rng, 1.0, true);
    auto fn = [&x]() { return mse(x, Tensor::zeros({7})); };
    CHECK(grad_check(fn, {x}, 1e-5) < 1e-7);
}

TEST_CASE("grad_check: constant function has ~zero error") {
    Tensor x = Tensor::scalar(1.5, true);
    auto fn = [&x]() { return scale(mse(x, x), 3.0); };
    CHECK(grad_check(fn, {x}, 1e-5) < 1e-10);
    CHECK_THROWS_AS(grad_check(fn, {x}, 0.0), ArgumentError);
}

TEST_CASE("grad_check: gated two-branch block with condition projection") {
    // tanh(conv_f(x) + 1x1_f(c)) * sigmoid(conv_g(x) + 1x1_g(c)) summed.
    Rng rng(6);
    Tensor x = random_tensor({3, 9}, rng, 0.7);
    Tensor c = random_tensor({2, 9}, rng, 0.7);
    Tensor wf = random_tensor({4, 3, 2}, rng, 0.6, true);
    Tensor bf = random_tensor({4}, rng, 0.2, true);
    Tensor wg = random_tensor({4, 3, 2}, rng, 0.6, true);
    Tensor bg = random_tensor({4}, rng, 0.2, true);
    Tensor vf = random_tensor({4, 2}, rng, 0.6, true);
    Tensor vg = random_tensor({4, 2}, rng, 0.6, true);
    Tensor zb = Tensor::zeros({4});
    auto fn = [&]() {
        Tensor f = add(conv1d_causal(x, wf, bf, 2), conv1x1(c, vf, zb));
        Tensor g = add(conv1d_causal(x, wg, bg, 2), conv1x1(c, vg, zb));
        Tensor out = mul(tanh(f), sigmoid(g));
        return mse(out, Tensor::zeros(out.shape()));
    };
    CHECK(grad_check(fn, {wf, bf, wg, bg, vf, vg}, 1e-5) < 1e-4);
}

TEST_CASE("grad_check over every structural op") {
    Rng rng(13);
    Tensor a = random_tensor({3, 6}, rng, 0.8, true);
    Tensor b = random_tensor({2, 6}, rng, 0.8, true);
    SUBCASE("concat + slice + reverse + repeat") {
        auto fn = [&]() {
            Tensor cat = concat_rows(a, b);
            Tensor sl = slice_rows(cat, 1, 4);
            Tensor rv = reverse_cols(sl);
            Tensor up = repeat_cols(rv, 3);
            return mse(up, Tensor::zeros(up.shape()));
        };
        CHECK(grad_check(fn, {a, b}, 1e-5) < 1e-6);
    }
    SUBCASE("relu + scale + add") {
        auto fn = [&]() {
            Tensor y = add(relu(a), scale(a, -0.4));
            return mse(y, Tensor::zeros(y.shape()));
        };
        CHECK(grad_check(fn, {a}, 1e-5) < 1e-4);  // relu kink stays off-grid here
    }
    SUBCASE("softmax cross entropy") {
        Tensor logits = random_tensor({5, 4}, rng, 1.0, true);
        auto fn = [&]() { return softmax_cross_entropy(logits, {0, 3, 2, 4}); };
        CHECK(grad_check(fn, {logits}, 1e-5) < 1e-6);
    }
    SUBCASE("masked mse") {
        Tensor pred = random_tensor({2, 5}, rng, 1.0, true);
        Tensor target = random_tensor({2, 5}, rng, 1.0);
        Tensor mask = Tensor::from_data({1, 0, 1, 1, 0, 0, 1, 0, 1, 1}, {2, 5});
        auto fn = [&]() { return mse(pred, target, mask); };
        CHECK(grad_check(fn, {pred}, 1e-5) < 1e-6);
    }
    SUBCASE("fo_pool") {
        Tensor hh = random_tensor({2, 7}, rng, 0.8, true);
        Tensor o = uniform_tensor({2, 7}, rng, 0.1, 0.9, true);
        Tensor f = uniform_tensor({2, 7}, rng, 0.1, 0.9, true);
        Tensor h0 = random_tensor({2}, rng, 0.5, true);
        auto fn = [&]() {
            Tensor z = fo_pool(hh, o, f, h0);
            return mse(z, Tensor::zeros(z.shape()));
        };
        CHECK(grad_check(fn, {hh, o, f, h0}, 1e-5) < 1e-5);
    }
}

TEST_CASE("no-grad mode leaves outputs off the tape") {
    Tensor x = Tensor::scalar(2.0, true);
    NoGradGuard ng;
    Tensor y = scale(x, 3.0);
    CHECK_FALSE(y.on_tape());
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::from_data({1, 2, 3}, {2, 2}), DimensionError);
    CHECK_THROWS_AS(Tensor::from_data({1}, {}), ArgumentError);
    Tensor t = Tensor::zeros({2, 3});
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(t.item(), DimensionError);
    CHECK_THROWS_AS((void)t.grad(), UsageError);
}
