#include <cmath>
#include <random>

#include "doctest.h"
#include "lutq/autodiff.hpp"
#include "lutq/errors.hpp"
#include "oracles.hpp"

using namespace lutq;

TEST_CASE("tensor shape invariants") {
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), Error);
    CHECK_THROWS_AS(Tensor({0, 2}), Error);
    Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.reshape({3, 2}).dim(0) == 3);
    CHECK_THROWS_AS((void)t.reshape({4}), Error);
}

TEST_CASE("evaluate: single matmul with identity") {
    Graph g;
    auto x = g.input("x", {1, 2});
    auto w = g.parameter("W", {2, 2});
    auto y = g.matmul(x, w, "y");
    const Evaluation ev = evaluate(g, {{"x", Tensor::matrix(1, 2, {1, 0})}, {"W", Tensor::matrix(2, 2, {1, 0, 0, 1})}});
    CHECK(ev.value(y) == Tensor::matrix(1, 2, {1, 0}));
    CHECK(ev.value("y") == Tensor::matrix(1, 2, {1, 0}));
}

TEST_CASE("evaluate: relu") {
    Graph g;
    auto x = g.input("x", {3});
    auto y = g.relu(x);
    CHECK(evaluate(g, {{"x", Tensor::vector({-1, 0, 2})}}).value(y) == Tensor::vector({0, 0, 2}));
}

TEST_CASE("evaluate: affine") {
    Graph g;
    auto x = g.input("x", {1, 2});
    auto w = g.parameter("W", {2, 2});
    auto b = g.parameter("b", {2});
    auto y = g.bias_add(g.linear(x, w), b);
    const Evaluation ev = evaluate(g, {{"x", Tensor::matrix(1, 2, {1, 1})},
                                       {"W", Tensor::matrix(2, 2, {1, 2, 3, 4})},
                                       {"b", Tensor::vector({0, 0})}});
    CHECK(ev.value(y) == Tensor::matrix(1, 2, {3, 7}));
}

TEST_CASE("evaluate errors name the node") {
    Graph g;
    auto a = g.input("a", {1, 3});
    auto w = g.parameter("W", {2, 2});
    g.matmul(a, w, "bad_product");
    try {
        evaluate(g, {{"a", Tensor({1, 3})}, {"W", Tensor({2, 2})}});
        FAIL("expected a shape error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::shape);
        CHECK(std::string(e.what()).find("bad_product") != std::string::npos);
    }

    Graph h;
    auto p = h.input("p", {2});
    h.mul(p, p, "overflow");
    try {
        evaluate(h, {{"p", Tensor::vector({1e200, 1.0})}});
        FAIL("expected a numeric error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::numeric);
        CHECK(std::string(e.what()).find("overflow") != std::string::npos);
    }

    Graph missing;
    missing.input("x", {2});
    CHECK_THROWS_AS(evaluate(missing, {}), Error);
    CHECK_THROWS_AS(evaluate(missing, {{"x", Tensor({3})}}), Error);
}

TEST_CASE("backprop of sum(W * x)") {
    Graph g;
    auto w = g.parameter("W", {2});
    auto x = g.input("x", {2});
    auto loss = g.sum(g.mul(w, x));
    const TensorMap b{{"W", Tensor::vector({0.5, -1})}, {"x", Tensor::vector({2, 3})}};
    const GradientMap grads = backprop(g, evaluate(g, b), loss);
    CHECK(grads.at("W") == Tensor::vector({2, 3}));
}

TEST_CASE("backprop of 0.5 ||Wx - t||^2") {
    Graph g;
    auto x = g.input("x", {1, 2});
    auto t = g.input("t", {1, 2});
    auto w = g.parameter("W", {2, 2});
    auto loss = g.squared_error(g.linear(x, w), t);
    const TensorMap b{{"x", Tensor::matrix(1, 2, {1, 0})},
                      {"t", Tensor::matrix(1, 2, {0, 0})},
                      {"W", Tensor::matrix(2, 2, {1, 0, 0, 1})}};
    const GradientMap grads = backprop(g, evaluate(g, b), loss);
    CHECK(grads.at("W") == Tensor::matrix(2, 2, {1, 0, 0, 0}));
}

TEST_CASE("backprop rejects a non-scalar loss") {
    Graph g;
    auto w = g.parameter("W", {2});
    auto y = g.relu(w);
    const TensorMap b{{"W", Tensor::vector({1, 2})}};
    CHECK_THROWS_AS(backprop(g, evaluate(g, b), y), Error);
}

TEST_CASE("finite_difference_check on simple losses") {
    std::mt19937_64 rng(11);
    SUBCASE("quadratic") {
        Graph g;
        auto x = g.input("x", {3, 4});
        auto t = g.input("t", {3, 2});
        auto w = g.parameter("W", {2, 4});
        auto loss = g.squared_error(g.linear(x, w), t);
        const TensorMap b{{"x", oracle::random_tensor({3, 4}, rng)},
                          {"t", oracle::random_tensor({3, 2}, rng)},
                          {"W", oracle::random_tensor({2, 4}, rng)}};
        CHECK(finite_difference_check(g, b, "W", loss, 1e-5) < 1e-6);
    }
    SUBCASE("constant loss") {
        Graph g;
        auto x = g.input("x", {2});
        g.parameter("W", {2});
        auto loss = g.sum(x);
        const TensorMap b{{"x", Tensor::vector({1, 2})}, {"W", Tensor::vector({3, 4})}};
        const GradientMap grads = backprop(g, evaluate(g, b), loss);
        CHECK(grads.at("W") == Tensor::vector({0, 0}));
        CHECK(finite_difference_check(g, b, "W", loss, 1e-5) == 0.0);
    }
    SUBCASE("bad step") {
        Graph g;
        auto w = g.parameter("W", {1});
        auto loss = g.sum(w);
        CHECK_THROWS_AS(finite_difference_check(g, {{"W", Tensor::vector({1})}}, "W", loss, 0.0), Error);
    }
}

namespace {

// Resamples until every ReLU pre-activation is at least 1e-3 from the kink.
TensorMap relu_net_bindings(const Graph& g, NodeId pre_activation, std::mt19937_64& rng) {
    for (;;) {
        TensorMap b{{"x", oracle::random_tensor({4, 3}, rng)},
                    {"labels", Tensor::vector({0, 1, 1, 0})},
                    {"W1", oracle::random_tensor({5, 3}, rng)},
                    {"b1", oracle::random_tensor({5}, rng)},
                    {"W2", oracle::random_tensor({2, 5}, rng)}};
        const Evaluation ev = evaluate(g, b);
        const Tensor& z = ev.value(pre_activation);
        bool clear = true;
        for (double v : z.values()) clear = clear && std::fabs(v) >= 1e-3;
        if (clear) return b;
    }
}

}  // namespace

TEST_CASE("finite differences on a ReLU network away from kinks") {
    Graph g;
    auto x = g.input("x", {4, 3});
    auto labels = g.input("labels", {4});
    auto w1 = g.parameter("W1", {5, 3});
    auto b1 = g.parameter("b1", {5});
    auto w2 = g.parameter("W2", {2, 5});
    auto z = g.bias_add(g.linear(x, w1), b1);
    auto loss = g.softmax_cross_entropy(g.linear(g.relu(z), w2), labels);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const TensorMap b = relu_net_bindings(g, z, rng);
        for (const char* p : {"W1", "b1", "W2"}) CHECK(finite_difference_check(g, b, p, loss, 1e-5) < 1e-4);
    }
}

TEST_CASE("finite differences for every differentiable op") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Graph g;
        auto x = g.input("x", {2, 2, 4, 4});
        auto k = g.parameter("K", {3, 2, 3, 3});
        auto cb = g.parameter("cb", {3});
        auto gamma = g.parameter("gamma", {3});
        auto beta = g.parameter("beta", {3});
        auto conv = g.bias_add(g.conv2d(x, k, {2, 1}), cb);  // stride 2, pad 1 -> [2,3,2,2]
        auto bn = g.batch_norm(conv, gamma, beta, 1e-5, BatchNormMode::standard);
        auto m = g.parameter("M", {12, 2});
        auto a = g.parameter("A", {2, 12});
        auto scale = g.parameter("S", {2, 2});
        auto mm = g.matmul(a, m);                    // [2,2]
        auto lin = g.linear(bn, g.parameter("L", {2, 12}));  // flattens [2,3,2,2]
        auto mixed = g.add(g.mul(mm, scale), lin);
        auto loss = g.add(g.mean(mixed), g.sum(g.mul(mixed, mixed)));

        const TensorMap b{{"x", oracle::random_tensor({2, 2, 4, 4}, rng)},
                          {"K", oracle::random_tensor({3, 2, 3, 3}, rng)},
                          {"cb", oracle::random_tensor({3}, rng)},
                          {"gamma", oracle::random_tensor({3}, rng, 0.5, 1.5)},
                          {"beta", oracle::random_tensor({3}, rng)},
                          {"M", oracle::random_tensor({12, 2}, rng)},
                          {"A", oracle::random_tensor({2, 12}, rng)},
                          {"S", oracle::random_tensor({2, 2}, rng)},
                          {"L", oracle::random_tensor({2, 12}, rng)}};
        for (const auto& [name, id] : g.parameters()) {
            (void)id;
            if (name == "cb") continue;
            CHECK_MESSAGE(finite_difference_check(g, b, name, loss, 1e-5) < 1e-4, name);
        }
        // BN removes a per-channel shift, so the conv bias has no effect on the loss.
        const GradientMap grads = backprop(g, evaluate(g, b), loss);
        for (double v : grads.at("cb").values()) CHECK(std::fabs(v) < 1e-10);
    }
}

TEST_CASE("evaluate and backprop are bit-reproducible") {
    std::mt19937_64 rng(9);
    Graph g;
    auto x = g.input("x", {4, 3});
    auto labels = g.input("labels", {4});
    auto w1 = g.parameter("W1", {5, 3});
    auto b1 = g.parameter("b1", {5});
    auto w2 = g.parameter("W2", {2, 5});
    auto loss = g.softmax_cross_entropy(g.linear(g.relu(g.bias_add(g.linear(x, w1), b1)), w2), labels);
    const TensorMap b{{"x", oracle::random_tensor({4, 3}, rng)},
                      {"labels", Tensor::vector({1, 0, 0, 1})},
                      {"W1", oracle::random_tensor({5, 3}, rng)},
                      {"b1", oracle::random_tensor({5}, rng)},
                      {"W2", oracle::random_tensor({2, 5}, rng)}};
    const Evaluation e1 = evaluate(g, b), e2 = evaluate(g, b);
    CHECK(e1.value(loss) == e2.value(loss));
    CHECK(backprop(g, e1, loss) == backprop(g, e2, loss));
}

TEST_CASE("chain rule on 1-D probes") {
    // loss = 0.5 (w a - t)^2 composed through mul then squared_error: d/dw = (w a - t) a.
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int trial = 0; trial < 50; ++trial) {
        const double w = u(rng), a = u(rng), t = u(rng);
        Graph g;
        auto wn = g.parameter("w", {1});
        auto an = g.input("a", {1});
        auto tn = g.input("t", {1});
        auto loss = g.squared_error(g.mul(wn, an), tn);
        const TensorMap b{{"w", Tensor::vector({w})}, {"a", Tensor::vector({a})}, {"t", Tensor::vector({t})}};
        const double grad = backprop(g, evaluate(g, b), loss).at("w")[0];
        CHECK(grad == doctest::Approx((w * a - t) * a).epsilon(1e-14));
    }
}

TEST_CASE("sgd_update") {
    const TensorMap w{{"W", Tensor::vector({1, 1})}};
    CHECK(sgd_update(w, {{"W", Tensor::vector({1, -1})}}, 0.1).at("W") == Tensor::vector({0.9, 1.1}));
    CHECK(sgd_update(w, {{"W", Tensor::vector({1, -1})}}, 0.0).at("W") == w.at("W"));
    CHECK(sgd_update({{"W", Tensor::vector({2})}}, {{"W", Tensor::vector({4})}}, 0.5).at("W") == Tensor::vector({0}));
    CHECK_THROWS_AS(sgd_update(w, {}, 0.1), Error);
    CHECK_THROWS_AS(sgd_update(w, {{"W", Tensor::vector({1})}}, 0.1), Error);
}
