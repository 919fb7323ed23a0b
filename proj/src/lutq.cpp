#include "lutq/lutq.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include "lutq/errors.hpp"
#include "lutq/numeric.hpp"

namespace lutq {

// --- constraints ----------------------------------------------------------------------------

DictionaryConstraint DictionaryConstraint::unconstrained() { return {}; }

DictionaryConstraint DictionaryConstraint::power_of_two() {
    DictionaryConstraint c;
    c.kind_ = Kind::power_of_two;
    return c;
}

DictionaryConstraint DictionaryConstraint::fixed_set(std::vector<double> values) {
    if (values.empty()) fail(ErrorCategory::config, "fixed dictionary set must not be empty");
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) fail(ErrorCategory::config, "fixed dictionary values must be finite");
        if (i > 0 && !(values[i] > values[i - 1]))
            fail(ErrorCategory::config, "fixed dictionary values must be strictly increasing");
    }
    DictionaryConstraint c;
    c.kind_ = Kind::fixed_set;
    c.values_ = std::move(values);
    return c;
}

DictionaryConstraint DictionaryConstraint::pruned(double fraction, DictionaryConstraint inner) {
    if (!(fraction >= 0.0 && fraction < 1.0)) fail(ErrorCategory::config, "pruning fraction must be in [0, 1)");
    if (inner.is_pruned()) fail(ErrorCategory::config, "pruning constraints cannot be nested");
    DictionaryConstraint c;
    c.kind_ = Kind::pruned_zero;
    c.fraction_ = fraction;
    c.inner_ = std::make_shared<const DictionaryConstraint>(std::move(inner));
    return c;
}

const DictionaryConstraint& DictionaryConstraint::inner() const {
    if (!inner_) fail(ErrorCategory::config, "constraint has no inner constraint");
    return *inner_;
}

std::size_t DictionaryConstraint::required_size() const {
    if (kind_ == Kind::fixed_set) return values_.size();
    if (kind_ == Kind::pruned_zero && inner().kind() == Kind::fixed_set) return inner().fixed_values().size() + 1;
    return 0;
}

std::string DictionaryConstraint::describe() const {
    std::ostringstream os;
    switch (kind_) {
        case Kind::unconstrained: os << "unconstrained"; break;
        case Kind::power_of_two: os << "pow2"; break;
        case Kind::fixed_set:
            os << "fixed{";
            for (std::size_t i = 0; i < values_.size(); ++i) os << (i ? "," : "") << values_[i];
            os << '}';
            break;
        case Kind::pruned_zero: os << "pruned(" << fraction_ << "," << inner().describe() << ')'; break;
    }
    return os.str();
}

bool operator==(const DictionaryConstraint& a, const DictionaryConstraint& b) {
    if (a.kind_ != b.kind_ || a.fraction_ != b.fraction_ || a.values_ != b.values_) return false;
    if (a.is_pruned()) return a.inner() == b.inner();
    return true;
}

// --- basic steps ----------------------------------------------------------------------------

Tensor tied_weights(const QuantizedLayerState& state) {
    Tensor q(state.weights.shape());
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = state.dictionary[state.assignments[i]];
    return q;
}

namespace {

std::uint32_t nearest(double w, std::span<const double> d, std::size_t first) {
    std::size_t best = first;
    double best_dist = std::fabs(w - d[first]);
    for (std::size_t k = first + 1; k < d.size(); ++k) {
        const double dist = std::fabs(w - d[k]);
        if (dist < best_dist) {
            best = k;
            best_dist = dist;
        }
    }
    return static_cast<std::uint32_t>(best);
}

}  // namespace

std::vector<std::uint32_t> assign_step(std::span<const double> weights, std::span<const double> dictionary) {
    if (dictionary.empty()) fail(ErrorCategory::config, "dictionary must have at least one entry");
    std::vector<std::uint32_t> a(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) a[i] = nearest(weights[i], dictionary, 0);
    return a;
}

std::vector<double> centroid_step(std::span<const double> weights, std::span<const std::uint32_t> assignments,
                                  std::span<const double> previous, std::size_t* empty_clusters) {
    const std::size_t k = previous.size();
    std::vector<double> sum(k, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (assignments[i] >= k) fail(ErrorCategory::shape, "assignment index out of range");
        sum[assignments[i]] += weights[i];
        ++count[assignments[i]];
    }
    std::vector<double> d(previous.begin(), previous.end());
    for (std::size_t j = 0; j < k; ++j) {
        if (count[j] > 0)
            d[j] = sum[j] / static_cast<double>(count[j]);
        else if (empty_clusters)
            ++*empty_clusters;
    }
    return d;
}

namespace {

void project_free(std::span<double> d, const DictionaryConstraint& c) {
    switch (c.kind()) {
        case DictionaryConstraint::Kind::unconstrained:
        case DictionaryConstraint::Kind::fixed_set: break;
        case DictionaryConstraint::Kind::power_of_two:
            for (double& v : d) {
                if (v == 0.0) fail(ErrorCategory::numeric, "zero dictionary entry is not representable as a power of two");
                v = round_to_pow2(v);
            }
            break;
        case DictionaryConstraint::Kind::pruned_zero: fail(ErrorCategory::config, "nested pruning constraint");
    }
}

}  // namespace

std::vector<double> project_constraint(std::vector<double> d, const DictionaryConstraint& c) {
    for (double v : d)
        if (!std::isfinite(v)) fail(ErrorCategory::numeric, "dictionary contains a non-finite value");
    if (c.is_pruned()) {
        if (d.empty()) fail(ErrorCategory::config, "pruned dictionary needs at least one entry");
        d[0] = 0.0;
        project_free(std::span<double>(d).subspan(1), c.inner());
    } else {
        project_free(d, c);
    }
    return d;
}

double quantization_error(const QuantizedLayerState& state) {
    double e = 0.0;
    for (std::size_t i = 0; i < state.weights.size(); ++i) {
        const double r = state.weights[i] - state.dictionary[state.assignments[i]];
        e += r * r;
    }
    return e;
}

// --- k-means --------------------------------------------------------------------------------

namespace {

std::size_t pruned_count(double fraction, std::size_t n) {
    const double raw = fraction * static_cast<double>(n);
    return std::min(n, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

/// Indices of the `count` smallest-magnitude weights (ties by index), as a mask.
std::vector<bool> magnitude_mask(std::span<const double> w, std::size_t count) {
    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto less = [&](std::size_t a, std::size_t b) {
        const double ma = std::fabs(w[a]), mb = std::fabs(w[b]);
        return ma < mb || (ma == mb && a < b);
    };
    if (count < order.size()) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count), order.end(), less);
    std::vector<bool> mask(w.size(), false);
    for (std::size_t i = 0; i < count; ++i) mask[order[i]] = true;
    return mask;
}

void kmeans_iteration(QuantizedLayerState& s) {
    std::span<const double> w = s.weights.values();
    const DictionaryConstraint& c = s.constraint;
    if (c.is_pruned()) {
        const std::vector<bool> mask = magnitude_mask(w, pruned_count(c.pruning_fraction(), w.size()));
        const bool free_entries = s.dictionary.size() > 1;
        for (std::size_t i = 0; i < w.size(); ++i)
            s.assignments[i] = (mask[i] || !free_entries) ? 0u : nearest(w[i], s.dictionary, 1);
        if (c.inner().kind() != DictionaryConstraint::Kind::fixed_set) {
            s.dictionary = centroid_step(w, s.assignments, s.dictionary, &s.empty_cluster_events);
            // Cluster 0 is pinned, so an "empty" zero cluster is not an event worth counting.
        }
        s.dictionary = project_constraint(std::move(s.dictionary), c);
        return;
    }
    s.assignments = assign_step(w, s.dictionary);
    if (c.kind() == DictionaryConstraint::Kind::fixed_set) return;
    s.dictionary = centroid_step(w, s.assignments, s.dictionary, &s.empty_cluster_events);
    s.dictionary = project_constraint(std::move(s.dictionary), c);
}

}  // namespace

QuantizedLayerState kmeans_update(QuantizedLayerState state, std::size_t iterations, KMeansTrace* trace) {
    if (iterations < 1) fail(ErrorCategory::config, "k-means needs at least one iteration per update");
    if (state.dictionary.empty()) fail(ErrorCategory::config, "dictionary must have at least one entry");
    if (state.assignments.size() != state.weights.size()) state.assignments.assign(state.weights.size(), 0u);
    if (trace) trace->errors.push_back(quantization_error(state));
    for (std::size_t m = 0; m < iterations; ++m) {
        kmeans_iteration(state);
        if (trace) {
            trace->errors.push_back(quantization_error(state));
            ++trace->iterations_run;
        }
    }
    return state;
}

// --- initialization -------------------------------------------------------------------------

namespace {

std::vector<double> quantile_init(std::vector<double> values, std::size_t k) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    std::vector<double> d(k);
    for (std::size_t j = 0; j < k; ++j) {
        const double pos = (static_cast<double>(j) + 0.5) / static_cast<double>(k) * static_cast<double>(n - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, n - 1);
        const double t = pos - static_cast<double>(lo);
        d[j] = values[lo] + t * (values[hi] - values[lo]);
    }
    if (std::adjacent_find(d.begin(), d.end(), std::greater_equal<>()) == d.end()) return d;

    // Heavy ties collapsed some quantiles; pick evenly spaced distinct values instead.
    values.erase(std::unique(values.begin(), values.end()), values.end());
    const std::size_t u = values.size();
    for (std::size_t j = 0; j < k; ++j) d[j] = values[std::min(u - 1, (2 * j + 1) * u / (2 * k))];
    return d;
}

std::size_t distinct_count(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    return static_cast<std::size_t>(std::unique(values.begin(), values.end()) - values.begin());
}

/// Dictionary for the free (non-pinned) entries.
std::vector<double> initial_free_dictionary(std::vector<double> values, std::size_t k, const DictionaryConstraint& c) {
    if (k == 0) return {};
    if (c.kind() == DictionaryConstraint::Kind::fixed_set) return c.fixed_values();
    if (values.empty()) return std::vector<double>(k, c.kind() == DictionaryConstraint::Kind::power_of_two ? 1.0 : 0.0);
    const std::size_t distinct = distinct_count(values);
    if (c.kind() == DictionaryConstraint::Kind::unconstrained && k >= distinct) {
        if (k > distinct)
            std::clog << "lutq: warning: K=" << k << " exceeds the " << distinct
                      << " distinct weight values; using K=" << distinct << '\n';
        std::sort(values.begin(), values.end());
        values.erase(std::unique(values.begin(), values.end()), values.end());
        return values;
    }
    return project_constraint(quantile_init(std::move(values), std::min(k, distinct)), c);
}

}  // namespace

QuantizedLayerState init_quantized_layer(const Tensor& weights, std::size_t k, const DictionaryConstraint& constraint,
                                         InitOptions options) {
    if (k < 1) fail(ErrorCategory::config, "dictionary size K must be >= 1");
    if (weights.empty()) fail(ErrorCategory::shape, "cannot quantize an empty weight tensor");
    if (const std::size_t need = constraint.required_size(); need != 0 && need != k)
        fail(ErrorCategory::config, "constraint " + constraint.describe() + " needs K=" + std::to_string(need) +
                                        ", got K=" + std::to_string(k));
    require_finite(weights, "weights to quantize");

    QuantizedLayerState s;
    s.weights = weights;
    s.constraint = constraint;
    std::span<const double> w = weights.values();

    if (constraint.is_pruned()) {
        const std::vector<bool> mask = magnitude_mask(w, pruned_count(constraint.pruning_fraction(), w.size()));
        std::vector<double> kept;
        for (std::size_t i = 0; i < w.size(); ++i)
            if (!mask[i]) kept.push_back(w[i]);
        std::vector<double> free = initial_free_dictionary(std::move(kept), k - 1, constraint.inner());
        s.dictionary.push_back(0.0);
        s.dictionary.insert(s.dictionary.end(), free.begin(), free.end());
    } else {
        std::vector<double> all(w.begin(), w.end());
        s.dictionary = initial_free_dictionary(std::move(all), k, constraint);
        // pow2 rounding may leave fewer distinct values; K is kept as requested by padding duplicates.
        while (constraint.kind() == DictionaryConstraint::Kind::power_of_two && s.dictionary.size() < k)
            s.dictionary.push_back(s.dictionary.back());
    }
    s.assignments.assign(w.size(), 0u);

    const std::size_t warmup = std::max<std::size_t>(1, options.warmup_iterations);
    for (std::size_t m = 0; m < warmup; ++m) {
        auto before_a = s.assignments;
        auto before_d = s.dictionary;
        s = kmeans_update(std::move(s), 1);
        if (m > 0 && s.assignments == before_a && s.dictionary == before_d) break;
    }
    s.empty_cluster_events = 0;
    return s;
}

double sparsity(const QuantizedLayerState& state) {
    if (state.assignments.empty()) return 0.0;
    std::size_t zeros = 0;
    for (auto a : state.assignments)
        if (state.dictionary[a] == 0.0) ++zeros;
    return static_cast<double>(zeros) / static_cast<double>(state.assignments.size());
}

void check_invariants(const QuantizedLayerState& s) {
    const std::size_t k = s.dictionary.size();
    if (k < 1) fail(ErrorCategory::numeric, "dictionary is empty");
    if (s.assignments.size() != s.weights.size()) fail(ErrorCategory::numeric, "assignment count != weight count");
    for (auto a : s.assignments)
        if (a >= k) fail(ErrorCategory::numeric, "assignment index " + std::to_string(a) + " >= K=" + std::to_string(k));
    for (double v : s.dictionary)
        if (!std::isfinite(v)) fail(ErrorCategory::numeric, "dictionary contains a non-finite value");

    const DictionaryConstraint& c = s.constraint;
    std::span<const double> free(s.dictionary);
    if (c.is_pruned()) {
        if (s.dictionary[0] != 0.0) fail(ErrorCategory::numeric, "pruned dictionary entry 0 is not zero");
        const auto zeros = static_cast<std::size_t>(std::count(s.assignments.begin(), s.assignments.end(), 0u));
        if (zeros < pruned_count(c.pruning_fraction(), s.assignments.size()))
            fail(ErrorCategory::numeric, "pruned share " + std::to_string(zeros) + "/" +
                                             std::to_string(s.assignments.size()) + " below " +
                                             std::to_string(c.pruning_fraction()));
        free = free.subspan(1);
    }
    const DictionaryConstraint& e = c.effective();
    if (e.kind() == DictionaryConstraint::Kind::power_of_two) {
        for (double v : free)
            if (!is_pow2_value(v)) fail(ErrorCategory::numeric, "dictionary value " + std::to_string(v) + " is not +-2^b");
    } else if (e.kind() == DictionaryConstraint::Kind::fixed_set) {
        if (!std::equal(free.begin(), free.end(), e.fixed_values().begin(), e.fixed_values().end()))
            fail(ErrorCategory::numeric, "fixed dictionary was modified");
    }
}

}  // namespace lutq
