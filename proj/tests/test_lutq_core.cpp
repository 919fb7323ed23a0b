#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "lutq/errors.hpp"
#include "lutq/lutq.hpp"
#include "lutq/numeric.hpp"
#include "oracles.hpp"

using namespace lutq;
using Assign = std::vector<std::uint32_t>;

namespace {

QuantizedLayerState make_state(std::vector<double> w, std::vector<double> d, DictionaryConstraint c = {}) {
    QuantizedLayerState s;
    const std::size_t n = w.size();
    s.weights = Tensor({n}, std::move(w));
    s.dictionary = std::move(d);
    s.assignments.assign(s.weights.size(), 0u);
    s.constraint = std::move(c);
    return s;
}

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

}  // namespace

TEST_CASE("tied_weights is a pure lookup") {
    QuantizedLayerState s;
    s.weights = Tensor({2, 2});
    s.dictionary = {-1, 1};
    s.assignments = {0, 1, 1, 0};
    CHECK(tied_weights(s) == Tensor::matrix(2, 2, {-1, 1, 1, -1}));

    s.dictionary = {0.75};
    s.assignments = {0, 0, 0, 0};
    CHECK(tied_weights(s) == Tensor({2, 2}, 0.75));

    s.weights = Tensor({1, 3});
    s.dictionary = {0, 0.5, 2};
    s.assignments = {2, 0, 1};
    CHECK(tied_weights(s) == Tensor::matrix(1, 3, {2, 0, 0.5}));
}

TEST_CASE("assign_step") {
    const std::vector<double> w{0.9, -1.1, 0.1}, d{-1, 0, 1};
    CHECK(assign_step(w, d) == Assign{2, 0, 1});
    CHECK(assign_step(std::vector<double>{0.5}, std::vector<double>{0, 1}) == Assign{0});
    CHECK(assign_step(w, std::vector<double>{3.0}) == Assign{0, 0, 0});
    CHECK_THROWS_AS(assign_step(w, std::vector<double>{}), Error);

    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto wv = random_values(rng, 20), dv = random_values(rng, 5);
        CHECK(assign_step(wv, dv) == oracle::nearest_assignment(wv, dv));
    }
}

TEST_CASE("centroid_step") {
    const std::vector<double> w{1, 2, 3, 10};
    CHECK(centroid_step(w, Assign{0, 0, 0, 1}, std::vector<double>{0, 0}) == std::vector<double>{2, 10});
    CHECK(centroid_step(std::vector<double>{4, 4, 4}, Assign{0, 1, 0}, std::vector<double>{9, 9}) ==
          std::vector<double>{4, 4});
    std::size_t empty = 0;
    CHECK(centroid_step(w, Assign{0, 0, 0, 0}, std::vector<double>{0, 7}, &empty) == std::vector<double>{4, 7});
    CHECK(empty == 1);
}

TEST_CASE("project_constraint") {
    CHECK(project_constraint({0.3}, DictionaryConstraint::power_of_two()) == std::vector<double>{0.25});
    CHECK(project_constraint({1.0, -2.0}, DictionaryConstraint::power_of_two()) == std::vector<double>{1.0, -2.0});
    CHECK(project_constraint({0.1, 0.7}, DictionaryConstraint::pruned(0.5, DictionaryConstraint::power_of_two())) ==
          std::vector<double>{0.0, 0.5});
    CHECK_THROWS_AS(project_constraint({0.0, 1.0}, DictionaryConstraint::power_of_two()), Error);
    CHECK(project_constraint({-1, 1}, DictionaryConstraint::binary()) == std::vector<double>{-1, 1});
    CHECK(project_constraint({0.3, -0.2}, DictionaryConstraint::unconstrained()) == std::vector<double>{0.3, -0.2});
}

TEST_CASE("project_constraint is idempotent") {
    std::mt19937_64 rng(2);
    const std::vector<DictionaryConstraint> constraints{
        DictionaryConstraint::unconstrained(), DictionaryConstraint::power_of_two(),
        DictionaryConstraint::pruned(0.3), DictionaryConstraint::pruned(0.6, DictionaryConstraint::power_of_two())};
    for (int trial = 0; trial < 200; ++trial) {
        const auto d = random_values(rng, 6, -5, 5);
        for (const auto& c : constraints) {
            const auto once = project_constraint(d, c);
            CHECK(project_constraint(once, c) == once);
        }
    }
}

TEST_CASE("constraint construction validates") {
    CHECK_THROWS_AS(DictionaryConstraint::fixed_set({1, 1}), Error);
    CHECK_THROWS_AS(DictionaryConstraint::fixed_set({}), Error);
    CHECK_THROWS_AS(DictionaryConstraint::pruned(1.0), Error);
    CHECK_THROWS_AS(DictionaryConstraint::pruned(-0.1), Error);
    CHECK_THROWS_AS(DictionaryConstraint::pruned(0.5, DictionaryConstraint::pruned(0.1)), Error);
    CHECK(DictionaryConstraint::ternary().required_size() == 3);
    CHECK(DictionaryConstraint::pruned(0.5, DictionaryConstraint::binary()).required_size() == 3);
}

TEST_CASE("kmeans_update examples") {
    SUBCASE("Lloyd fixed point on [1,2,3,10]") {
        auto s = kmeans_update(make_state({1, 2, 3, 10}, {1, 10}), 2);
        CHECK(s.dictionary == std::vector<double>{2, 10});
        CHECK(s.assignments == Assign{0, 0, 0, 1});
        CHECK(quantization_error(s) == doctest::Approx(oracle::best_partition_error({1, 2, 3, 10}, 2)));
    }
    SUBCASE("fixed binary set only assigns") {
        auto s = kmeans_update(make_state({0.2, -3}, {-1, 1}, DictionaryConstraint::binary()), 3);
        CHECK(s.assignments == Assign{1, 0});
        CHECK(s.dictionary == std::vector<double>{-1, 1});
    }
    SUBCASE("M = 0 is rejected, M = 1 is a single iteration") {
        CHECK_THROWS_AS(kmeans_update(make_state({1, 2}, {0, 5}), 0), Error);
        auto s = kmeans_update(make_state({1, 2, 3, 10}, {1, 10}), 1);
        const std::vector<double> w{1, 2, 3, 10};
        const Assign a = assign_step(w, std::vector<double>{1, 10});
        CHECK(s.assignments == a);
        CHECK(s.dictionary == centroid_step(w, a, std::vector<double>{1, 10}));
    }
    SUBCASE("pruning pins the smallest weights to zero") {
        auto s = kmeans_update(make_state({0.05, -0.9, 0.2, 1.1, -0.1, 0.6}, {0, -1, 1},
                                          DictionaryConstraint::pruned(0.5)),
                               1);
        CHECK(s.assignments == Assign{0, 1, 0, 2, 0, 2});
        CHECK(s.dictionary[0] == 0.0);
        CHECK(s.dictionary[1] == -0.9);
        CHECK(s.dictionary[2] == doctest::Approx(0.85));
    }
}

TEST_CASE("Lloyd monotonicity on random unconstrained instances") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 150; ++trial) {
        const std::size_t n = 5 + rng() % 60, k = 1 + rng() % 6;
        auto w = random_values(rng, n, -2, 2);
        QuantizedLayerState s = make_state(w, random_values(rng, k, -2, 2));
        KMeansTrace trace;
        s = kmeans_update(std::move(s), 15, &trace);
        REQUIRE(trace.errors.size() == 16);
        for (std::size_t i = 1; i < trace.errors.size(); ++i) CHECK(trace.errors[i] <= trace.errors[i - 1] + 1e-12);
    }
}

TEST_CASE("k-means fixed points agree with the enumeration oracle") {
    std::mt19937_64 rng(4);
    int global_hits = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng() % 7, k = 1 + rng() % 3;
        const auto w = random_values(rng, n, -3, 3);
        QuantizedLayerState s = init_quantized_layer(Tensor({n}, w), k, DictionaryConstraint::unconstrained());
        s = kmeans_update(std::move(s), 50);
        const std::size_t kk = s.dictionary.size();
        CHECK(quantization_error(s) == doctest::Approx(oracle::partition_error(w, s.assignments, kk)).epsilon(1e-12));
        CHECK(assign_step(w, s.dictionary) == s.assignments);
        const double best = oracle::best_partition_error(w, kk);
        CHECK(quantization_error(s) >= best - 1e-12);
        if (std::fabs(quantization_error(s) - best) <= 1e-12) ++global_hits;
    }
    MESSAGE("fixed points that are also global optima: " << global_hits << "/100");
}

TEST_CASE("init_quantized_layer") {
    SUBCASE("uniform weights, K = 2") {
        std::vector<double> w(2001);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = -1.0 + 2.0 * static_cast<double>(i) / 2000.0;
        auto s = init_quantized_layer(Tensor({w.size()}, w), 2, DictionaryConstraint::unconstrained());
        CHECK(s.dictionary[0] == doctest::Approx(-0.5).epsilon(1e-3));
        CHECK(s.dictionary[1] == doctest::Approx(0.5).epsilon(1e-3));
    }
    SUBCASE("fixed set keeps the set") {
        auto s = init_quantized_layer(Tensor::vector({0.4, -0.2, 2, -5}), 3, DictionaryConstraint::ternary());
        CHECK(s.dictionary == std::vector<double>{-1, 0, 1});
        CHECK(s.assignments == Assign{1, 1, 2, 0});
        CHECK_THROWS_AS(init_quantized_layer(Tensor::vector({1, 2}), 2, DictionaryConstraint::ternary()), Error);
    }
    SUBCASE("K = 1 is the mean") {
        auto s = init_quantized_layer(Tensor::vector({1, 2, 6}), 1, DictionaryConstraint::unconstrained());
        CHECK(s.dictionary == std::vector<double>{3});
    }
    SUBCASE("K = number of distinct values gives zero error") {
        auto s = init_quantized_layer(Tensor::vector({3, 1, 3, 2, 1, 1}), 3, DictionaryConstraint::unconstrained());
        CHECK(quantization_error(s) == 0.0);
        CHECK(tied_weights(s) == s.weights);
    }
    SUBCASE("K larger than the distinct count is reduced") {
        auto s = init_quantized_layer(Tensor::vector({1, 1, 2}), 5, DictionaryConstraint::unconstrained());
        CHECK(s.dictionary.size() == 2);
    }
    SUBCASE("K < 1") {
        CHECK_THROWS_AS(init_quantized_layer(Tensor::vector({1}), 0, DictionaryConstraint::unconstrained()), Error);
    }
    SUBCASE("deterministic") {
        std::mt19937_64 rng(5);
        const Tensor w({300}, random_values(rng, 300));
        auto a = init_quantized_layer(w, 8, DictionaryConstraint::power_of_two());
        auto b = init_quantized_layer(w, 8, DictionaryConstraint::power_of_two());
        CHECK(a.dictionary == b.dictionary);
        CHECK(a.assignments == b.assignments);
    }
}

TEST_CASE("sparsity") {
    std::mt19937_64 rng(6);
    const Tensor w({1000}, random_values(rng, 1000));
    auto pruned = init_quantized_layer(w, 4, DictionaryConstraint::pruned(0.7));
    CHECK(sparsity(pruned) >= 0.7);
    pruned = kmeans_update(std::move(pruned), 1);
    CHECK(sparsity(pruned) >= 0.7);

    auto plain = init_quantized_layer(w, 4, DictionaryConstraint::unconstrained());
    CHECK(sparsity(plain) == 0.0);

    auto all = init_quantized_layer(w, 1, DictionaryConstraint::pruned(0.2));
    CHECK(sparsity(all) == 1.0);
}

TEST_CASE("invariants survive updates for every constraint") {
    std::mt19937_64 rng(7);
    const std::vector<std::pair<DictionaryConstraint, std::size_t>> cases{
        {DictionaryConstraint::unconstrained(), 4},
        {DictionaryConstraint::power_of_two(), 4},
        {DictionaryConstraint::binary(), 2},
        {DictionaryConstraint::ternary(), 3},
        {DictionaryConstraint::pruned(0.7), 4},
        {DictionaryConstraint::pruned(0.5, DictionaryConstraint::power_of_two()), 4},
    };
    std::normal_distribution<double> noise(0.0, 0.05);
    for (const auto& [c, k] : cases) {
        QuantizedLayerState s = init_quantized_layer(Tensor({64}, random_values(rng, 64)), k, c);
        check_invariants(s);
        for (int step = 0; step < 100; ++step) {
            for (double& v : s.weights.values()) v += noise(rng);
            check_invariants(s);
            s = kmeans_update(std::move(s), 1);
            CHECK_NOTHROW(check_invariants(s));
            CHECK(max_abs_diff(tied_weights(s), tied_weights(s)) == 0.0);
        }
    }
}

TEST_CASE("check_invariants detects violations") {
    QuantizedLayerState s = make_state({1, 2}, {0.5, 1.0}, DictionaryConstraint::power_of_two());
    CHECK_NOTHROW(check_invariants(s));
    s.dictionary[0] = 0.3;
    CHECK_THROWS_AS(check_invariants(s), Error);
    s = make_state({1, 2}, {-1, 1}, DictionaryConstraint::binary());
    s.dictionary[1] = 0.9;
    CHECK_THROWS_AS(check_invariants(s), Error);
    s = make_state({1, 2}, {0, 1}, DictionaryConstraint::pruned(0.5));
    s.assignments = {1, 1};
    CHECK_THROWS_AS(check_invariants(s), Error);
    s.assignments = {0, 2};
    CHECK_THROWS_AS(check_invariants(s), Error);
}
