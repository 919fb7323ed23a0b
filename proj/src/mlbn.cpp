#include "lutq/mlbn.hpp"

#include <cmath>

#include "lutq/errors.hpp"
#include "lutq/numeric.hpp"

namespace lutq {

ScaleOffset fold_bn(const BNState& state) {
    state.validate();
    ScaleOffset f;
    const std::size_t c = state.channels();
    f.scale.resize(c);
    f.offset.resize(c);
    for (std::size_t o = 0; o < c; ++o) {
        const double denom = std::sqrt(state.running_var[o] + state.epsilon);
        f.scale[o] = state.gamma[o] / denom;
        f.offset[o] = state.beta[o] - state.gamma[o] * state.running_mean[o] / denom;
    }
    return f;
}

std::vector<double> quantize_scale_pow2(std::span<const double> a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = round_to_pow2(a[i]);
    return out;
}

FoldedBN fold_mlbn(const BNState& state) {
    ScaleOffset base = fold_bn(state);
    FoldedBN f;
    f.scale = std::move(base.scale);
    f.pow2_scale = quantize_scale_pow2(f.scale);
    f.exponents.assign(f.scale.size(), 0);
    f.offset.resize(f.scale.size());
    for (std::size_t o = 0; o < f.scale.size(); ++o) {
        if (f.pow2_scale[o] != 0.0) f.exponents[o] = pow2_exponent(f.pow2_scale[o]);
        f.offset[o] = state.beta[o] - f.pow2_scale[o] * state.running_mean[o];
    }
    return f;
}

MlbnForward mlbn_forward_train(const Tensor& x, const BNState& state) {
    state.validate();
    // Batch statistics first (with the full-precision gamma), then redo the affine part with gamma_hat.
    BatchNormForward plain = batch_norm_forward(x, state.gamma, state.beta, state.epsilon);
    BatchNormCache& cache = plain.cache;
    for (std::size_t c = 0; c < state.channels(); ++c) {
        const double sigma = std::sqrt(cache.variance[c] + state.epsilon);
        const double a_hat = round_to_pow2(state.gamma[c] / sigma);
        cache.gamma_used[c] = a_hat * sigma;
    }
    const ChannelLayout& l = cache.layout;
    Tensor y(x.shape());
    for (std::size_t s = 0; s < l.outer; ++s)
        for (std::size_t c = 0; c < l.channels; ++c) {
            const std::size_t base = (s * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i)
                y[base + i] = cache.gamma_used[c] * cache.x_hat[base + i] + state.beta[c];
        }
    return {std::move(y), std::move(cache)};
}

BatchNormGrads mlbn_backward(const BatchNormCache& cache, const Tensor& upstream) {
    return batch_norm_backward(cache, upstream);
}

Tensor mlbn_infer(const Tensor& x, const FoldedBN& folded) {
    return folded_bn_infer(x, ScaleOffset{folded.pow2_scale, folded.offset});
}

Tensor folded_bn_infer(const Tensor& x, const ScaleOffset& folded) {
    const ChannelLayout l = ChannelLayout::of(x);
    if (l.channels != folded.scale.size() || folded.offset.size() != folded.scale.size())
        fail(ErrorCategory::shape, "folded BN over " + std::to_string(folded.scale.size()) + " channels got " +
                                       shape_to_string(x.shape()));
    Tensor y(x.shape());
    for (std::size_t s = 0; s < l.outer; ++s)
        for (std::size_t c = 0; c < l.channels; ++c) {
            const std::size_t base = (s * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) y[base + i] = folded.scale[c] * x[base + i] + folded.offset[c];
        }
    return y;
}

}  // namespace lutq
