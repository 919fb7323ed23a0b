#pragma once

// Multiplier-less batch normalization.
//
// Inference-time BN is folded to y = a*x + b. The multiplier-less variant replaces a with its
// power-of-two rounding a_hat, so the scale becomes a shift. During training the forward pass runs
// ordinary BN with gamma_hat = a_hat * sqrt(var + eps) in place of gamma, and the gradient computed
// for gamma_hat is applied to the full-precision gamma (straight-through).

#include <span>
#include <vector>

#include "lutq/layers.hpp"

namespace lutq {

struct ScaleOffset {
    std::vector<double> scale;   // a
    std::vector<double> offset;  // b
};

struct FoldedBN {
    std::vector<double> scale;       // a
    std::vector<double> offset;      // b, consistent with pow2_scale: beta - a_hat * mean
    std::vector<double> pow2_scale;  // a_hat
    std::vector<int> exponents;      // a_hat = sign(a) * 2^e (unused where a_hat == 0)

    std::size_t channels() const noexcept { return scale.size(); }
};

/// a = gamma / sqrt(var + eps), b = beta - gamma * mean / sqrt(var + eps), from running statistics.
ScaleOffset fold_bn(const BNState& state);

/// sign(a) * 2^round(log2|a|) per channel; zero channels stay zero.
std::vector<double> quantize_scale_pow2(std::span<const double> a);

/// Folds running statistics and rounds the scale to a power of two.
FoldedBN fold_mlbn(const BNState& state);

struct MlbnForward {
    Tensor y;
    BatchNormCache cache;  // gamma_used holds gamma_hat
};

MlbnForward mlbn_forward_train(const Tensor& x, const BNState& state);

/// Gradients as if gamma_hat were the parameter; dgamma is applied to the full-precision gamma.
BatchNormGrads mlbn_backward(const BatchNormCache& cache, const Tensor& upstream);

/// y = a_hat * x + b.
Tensor mlbn_infer(const Tensor& x, const FoldedBN& folded);

/// y = a * x + b with the standard folded scale.
Tensor folded_bn_infer(const Tensor& x, const ScaleOffset& folded);

}  // namespace lutq
