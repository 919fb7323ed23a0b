#pragma once

// Look-up table quantization of one layer's weights.
//
// The layer keeps full-precision shadow weights W, a dictionary d of K reals and an assignment
// index per weight. The tied weights used in the forward pass are Q[i] = d[A[i]]. Assignments are
// stored 0-based: index k here is dictionary entry k+1 in 1-based notation.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lutq/tensor.hpp"

namespace lutq {

class DictionaryConstraint {
public:
    enum class Kind : std::uint8_t { unconstrained = 0, power_of_two = 1, fixed_set = 2, pruned_zero = 3 };

    DictionaryConstraint() = default;

    static DictionaryConstraint unconstrained();
    static DictionaryConstraint power_of_two();
    /// Values must be strictly increasing.
    static DictionaryConstraint fixed_set(std::vector<double> values);
    static DictionaryConstraint binary() { return fixed_set({-1.0, 1.0}); }
    static DictionaryConstraint ternary() { return fixed_set({-1.0, 0.0, 1.0}); }
    /// Entry 0 is pinned to zero and holds at least a `fraction` share of the weights;
    /// `inner` governs entries 1..K-1 and may not itself be pruned.
    static DictionaryConstraint pruned(double fraction, DictionaryConstraint inner = unconstrained());

    Kind kind() const noexcept { return kind_; }
    double pruning_fraction() const noexcept { return fraction_; }
    const std::vector<double>& fixed_values() const noexcept { return values_; }
    /// Constraint on the non-zero entries of a pruned dictionary.
    const DictionaryConstraint& inner() const;

    bool is_pruned() const noexcept { return kind_ == Kind::pruned_zero; }
    /// Constraint actually applied to the free entries (inner for pruned, self otherwise).
    const DictionaryConstraint& effective() const { return is_pruned() ? inner() : *this; }

    /// Dictionary size implied by a fixed set (0 when the size is free).
    std::size_t required_size() const;

    std::string describe() const;

    friend bool operator==(const DictionaryConstraint& a, const DictionaryConstraint& b);

private:
    Kind kind_ = Kind::unconstrained;
    double fraction_ = 0.0;
    std::vector<double> values_;
    std::shared_ptr<const DictionaryConstraint> inner_;
};

struct QuantizedLayerState {
    Tensor weights;                           // W, full precision
    std::vector<double> dictionary;           // d
    std::vector<std::uint32_t> assignments;   // A, 0-based, row-major like W
    DictionaryConstraint constraint;
    std::size_t empty_cluster_events = 0;

    std::size_t dictionary_size() const noexcept { return dictionary.size(); }
};

/// Q = d[A], with W's shape.
Tensor tied_weights(const QuantizedLayerState& state);

/// Nearest dictionary entry per weight; ties go to the lowest index.
std::vector<std::uint32_t> assign_step(std::span<const double> weights, std::span<const double> dictionary);

/// Per-cluster means; an empty cluster keeps its previous value and bumps *empty_clusters.
std::vector<double> centroid_step(std::span<const double> weights, std::span<const std::uint32_t> assignments,
                                  std::span<const double> previous, std::size_t* empty_clusters = nullptr);

/// Maps a dictionary onto the constraint set.
std::vector<double> project_constraint(std::vector<double> dictionary, const DictionaryConstraint& constraint);

/// Sum of (W - Q)^2.
double quantization_error(const QuantizedLayerState& state);

/// Optional record of the quantization error before and after each k-means iteration.
struct KMeansTrace {
    std::vector<double> errors;
    std::size_t iterations_run = 0;
};

/// M iterations of assignment, centroid and projection.
QuantizedLayerState kmeans_update(QuantizedLayerState state, std::size_t iterations, KMeansTrace* trace = nullptr);

struct InitOptions {
    std::size_t warmup_iterations = 20;
};

/// Quantile-initialized dictionary followed by k-means warm-up until a fixed point.
QuantizedLayerState init_quantized_layer(const Tensor& weights, std::size_t k, const DictionaryConstraint& constraint,
                                         InitOptions options = {});

/// Fraction of weights whose dictionary value is zero.
double sparsity(const QuantizedLayerState& state);

/// Throws a numeric Error describing the first violated invariant.
void check_invariants(const QuantizedLayerState& state);

}  // namespace lutq
