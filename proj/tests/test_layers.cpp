#include <cmath>
#include <random>

#include "doctest.h"
#include "lutq/errors.hpp"
#include "lutq/layers.hpp"
#include "lutq/mlbn.hpp"
#include "lutq/network.hpp"
#include "oracles.hpp"

using namespace lutq;

TEST_CASE("affine_forward") {
    const Tensor x = Tensor::vector({0.25, -3});
    CHECK(affine_forward(x, Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor::vector({0, 0})) == x);
    CHECK(affine_forward(Tensor::vector({2, 3}), Tensor::matrix(1, 2, {1, 1}), Tensor::vector({1})) ==
          Tensor::vector({6}));
    CHECK_THROWS_AS(affine_forward(Tensor::vector({1, 2, 3}), Tensor::matrix(1, 2, {1, 1}), Tensor::vector({1})),
                    Error);

    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t out = 1 + rng() % 7, in = 1 + rng() % 9;
        const Tensor w = oracle::random_tensor({out, in}, rng);
        const Tensor xv = oracle::random_tensor({in}, rng);
        const Tensor b = oracle::random_tensor({out}, rng);
        std::vector<std::vector<double>> rows(out, std::vector<double>(in));
        for (std::size_t o = 0; o < out; ++o)
            for (std::size_t i = 0; i < in; ++i) rows[o][i] = w[o * in + i];
        const auto expected = oracle::naive_affine(rows, {xv.values().begin(), xv.values().end()},
                                                   {b.values().begin(), b.values().end()});
        const Tensor y = affine_forward(xv, w, b);
        for (std::size_t o = 0; o < out; ++o) CHECK(std::fabs(y[o] - expected[o]) <= 1e-12);
    }
}

TEST_CASE("conv2d with a 1x1 identity kernel is the identity") {
    std::mt19937_64 rng(2);
    const Tensor x = oracle::random_tensor({2, 3, 4, 5}, rng);
    Tensor k({3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
    CHECK(conv2d_forward(x, k, {}) == x);
}

TEST_CASE("conv2d output extents") {
    CHECK(conv_output_extent(5, 3, 1, 1) == 5);
    CHECK(conv_output_extent(4, 3, 2, 1) == 2);
    CHECK_THROWS_AS(conv_output_extent(2, 5, 1, 1), Error);
    CHECK_THROWS_AS(layer_output_shape(LayerSpec::conv2d(1, 2, 3), {2, 5, 5}), Error);
    CHECK(layer_output_shape(LayerSpec::conv2d(1, 2, 3, 1, 1), {1, 5, 5}) == Shape{2, 5, 5});
    CHECK_THROWS_AS(layer_output_shape(LayerSpec::affine(0, 3), {0}), Error);
}

TEST_CASE("batchnorm_train") {
    SUBCASE("identity normalization") {
        BNState s = BNState::identity(1);
        const Tensor x = Tensor::matrix(4, 1, {-1, 1, -1, 1});  // mean 0, biased variance 1
        const auto r = batchnorm_train(x, s);
        for (std::size_t i = 0; i < 4; ++i) CHECK(r.y[i] == doctest::Approx(x[i] / std::sqrt(1.0 + s.epsilon)));
        CHECK(r.state.running_mean[0] == doctest::Approx(0.0));
        // unbiased batch variance 4/3, momentum 0.1
        CHECK(r.state.running_var[0] == doctest::Approx(0.9 + 0.1 * 4.0 / 3.0));
    }
    SUBCASE("zero gamma gives beta") {
        BNState s = BNState::identity(2);
        s.gamma = {0, 0};
        s.beta = {0.5, -2};
        std::mt19937_64 rng(4);
        const auto r = batchnorm_train(oracle::random_tensor({5, 2}, rng), s);
        for (std::size_t n = 0; n < 5; ++n) {
            CHECK(r.y[n * 2] == 0.5);
            CHECK(r.y[n * 2 + 1] == -2.0);
        }
    }
    SUBCASE("output moments") {
        std::mt19937_64 rng(5);
        BNState s = BNState::identity(3);
        s.gamma = {2.0, -0.5, 1.5};
        s.beta = {0.1, 1.0, -3.0};
        const Tensor x = oracle::random_tensor({64, 3, 2, 2}, rng, -4, 7);
        const auto r = batchnorm_train(x, s);
        const std::size_t per = 64 * 4;
        for (std::size_t c = 0; c < 3; ++c) {
            double mx = 0, my = 0;
            for (std::size_t n = 0; n < 64; ++n)
                for (std::size_t i = 0; i < 4; ++i) {
                    mx += x[(n * 3 + c) * 4 + i];
                    my += r.y[(n * 3 + c) * 4 + i];
                }
            mx /= per;
            my /= per;
            double vx = 0, vy = 0;
            for (std::size_t n = 0; n < 64; ++n)
                for (std::size_t i = 0; i < 4; ++i) {
                    vx += std::pow(x[(n * 3 + c) * 4 + i] - mx, 2);
                    vy += std::pow(r.y[(n * 3 + c) * 4 + i] - my, 2);
                }
            vx /= per;
            vy /= per;
            CHECK(my == doctest::Approx(s.beta[c]).epsilon(1e-12));
            CHECK(vy == doctest::Approx(s.gamma[c] * s.gamma[c] * vx / (vx + s.epsilon)).epsilon(1e-10));
        }
    }
    SUBCASE("batch of one is rejected") {
        CHECK_THROWS_AS(batchnorm_train(Tensor::matrix(1, 2, {1, 2}), BNState::identity(2)), Error);
    }
}

TEST_CASE("batchnorm_infer") {
    SUBCASE("parameters cancel") {
        BNState s = BNState::identity(2);
        s.running_var = {1 - s.epsilon, 1 - s.epsilon};
        const Tensor x = Tensor::matrix(2, 2, {0.3, -7, 2, 11});
        CHECK(max_abs_diff(batchnorm_infer(x, s), x) <= 1e-15);
    }
    SUBCASE("hand substitution") {
        BNState s = BNState::identity(1);
        s.running_mean = {1};
        s.running_var = {3};
        s.epsilon = 1;
        s.gamma = {2};
        s.beta = {0.5};
        CHECK(batchnorm_infer(Tensor::vector({2}), s)[0] == doctest::Approx(1.5).epsilon(1e-15));
    }
    SUBCASE("equals folded a*x + b") {
        std::mt19937_64 rng(6);
        for (int trial = 0; trial < 200; ++trial) {
            BNState s = BNState::identity(4);
            const Tensor g = oracle::random_tensor({4}, rng, -3, 3), b = oracle::random_tensor({4}, rng, -3, 3);
            const Tensor m = oracle::random_tensor({4}, rng, -3, 3), v = oracle::random_tensor({4}, rng, 0, 5);
            s.gamma.assign(g.values().begin(), g.values().end());
            s.beta.assign(b.values().begin(), b.values().end());
            s.running_mean.assign(m.values().begin(), m.values().end());
            s.running_var.assign(v.values().begin(), v.values().end());
            const Tensor x = oracle::random_tensor({3, 4}, rng, -5, 5);
            CHECK(max_abs_diff(batchnorm_infer(x, s), folded_bn_infer(x, fold_bn(s))) <= 1e-12);
        }
    }
    SUBCASE("invalid states") {
        BNState s = BNState::identity(1);
        s.running_var = {-1};
        CHECK_THROWS_AS(batchnorm_infer(Tensor::vector({1}), s), Error);
        s = BNState::identity(1);
        s.epsilon = 0;
        CHECK_THROWS_AS(batchnorm_infer(Tensor::vector({1}), s), Error);
    }
}

TEST_CASE("act_quant_forward") {
    const ActQuantSpec spec{8, 1.0};
    CHECK(act_quant_forward(Tensor::vector({0}), spec)[0] == 0.0);
    CHECK(act_quant_forward(Tensor::vector({0.5}), spec)[0] == doctest::Approx(64.0 / 127.0).epsilon(1e-15));
    CHECK(act_quant_forward(Tensor::vector({10}), spec)[0] == 1.0);
    CHECK(act_quant_forward(Tensor::vector({-10}), spec)[0] == -1.0);
    CHECK(act_quant_code(-0.5, spec) == -64);  // half away from zero on both signs
    CHECK_THROWS_AS(act_quant_forward(Tensor::vector({1}), ActQuantSpec{8, 3.0}), Error);
    CHECK_THROWS_AS(act_quant_forward(Tensor::vector({1}), ActQuantSpec{1, 1.0}), Error);
}

TEST_CASE("act_quant is idempotent and lands on the grid") {
    std::mt19937_64 rng(7);
    for (int bits : {2, 4, 8}) {
        for (double range : {0.25, 1.0, 8.0}) {
            const ActQuantSpec spec{bits, range};
            const Tensor x = oracle::random_tensor({200}, rng, -2 * range, 2 * range);
            const Tensor q = act_quant_forward(x, spec);
            CHECK(act_quant_forward(q, spec) == q);
            for (double v : q.values()) {
                const double scaled = v * spec.levels() / range;
                CHECK(std::fabs(scaled - std::round(scaled)) <= 1e-9);
            }
        }
    }
}

TEST_CASE("act_quant_backward masks clipped entries") {
    const ActQuantSpec spec{8, 2.0};
    const Tensor up = Tensor::vector({1, 2, 3, 4, 5});
    CHECK(act_quant_backward(up, Tensor::vector({0.5, -1, 2, 4, -2.5}), spec) == Tensor::vector({1, 2, 3, 0, 0}));
    CHECK(act_quant_backward(Tensor::vector({7}), Tensor::vector({0.1}), spec)[0] == 7.0);
}

TEST_CASE("activation range calibration") {
    CHECK(act_range_for(0.7) == 1.0);
    CHECK(act_range_for(1.0) == 1.0);
    CHECK(act_range_for(5.0) == 8.0);
    CHECK(act_range_for(0.0) == 1.0);
    CHECK(act_range_for(0.2) == 0.25);

    Network net({2}, {LayerSpec::act_quant(8), LayerSpec::affine(2, 3), LayerSpec::act_quant(8)}, 1);
    net.shadow_weights(1) = Tensor::matrix(3, 2, {1, 0, 0, 1, 4, 4});
    const std::vector<double> r = calibrate_act_range(net, Tensor::matrix(2, 2, {0.7, -0.1, 0.2, 0.3}));
    REQUIRE(r.size() == 2);
    CHECK(r[0] == 1.0);
    CHECK(r[1] == 4.0);  // largest activation is about 4 * (0.7 - 0.1) = 2.4
    CHECK(net.params(2).act.range == 4.0);

    Network zero({1}, {LayerSpec::act_quant(8)}, 1);
    CHECK(calibrate_act_range(zero, Tensor::matrix(2, 1, {0, 0}))[0] == 1.0);
}
