#include "lutq/layers.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "lutq/errors.hpp"
#include "lutq/numeric.hpp"

namespace lutq {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::affine: return "affine";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::relu: return "relu";
        case LayerKind::act_quant: return "act_quant";
    }
    return "unknown";
}

std::string to_string(BatchNormMode mode) {
    return mode == BatchNormMode::multiplier_less ? "multiplier_less" : "standard";
}

LayerSpec LayerSpec::affine(std::size_t in, std::size_t out) {
    LayerSpec s;
    s.kind = LayerKind::affine;
    s.in = in;
    s.out = out;
    return s;
}

LayerSpec LayerSpec::conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in = in_channels;
    s.out = out_channels;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return s;
}

LayerSpec LayerSpec::batchnorm(std::size_t channels, BatchNormMode mode) {
    LayerSpec s;
    s.kind = LayerKind::batchnorm;
    s.in = channels;
    s.out = channels;
    s.bn_mode = mode;
    return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::act_quant(int bits) {
    LayerSpec s;
    s.kind = LayerKind::act_quant;
    s.bits = bits;
    return s;
}

Shape LayerSpec::weight_shape() const {
    if (kind == LayerKind::affine) return {out, in};
    if (kind == LayerKind::conv2d) return {out, in, kernel, kernel};
    fail(ErrorCategory::shape, to_string(kind) + " layer has no weights");
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
    if (stride == 0) fail(ErrorCategory::shape, "conv stride must be positive");
    if (in + 2 * padding < kernel)
        fail(ErrorCategory::shape, "conv kernel " + std::to_string(kernel) + " larger than padded input " +
                                       std::to_string(in + 2 * padding));
    return (in + 2 * padding - kernel) / stride + 1;
}

Shape layer_output_shape(const LayerSpec& spec, const Shape& input) {
    switch (spec.kind) {
        case LayerKind::affine:
            if (spec.in < 1 || spec.out < 1) fail(ErrorCategory::shape, "affine layer needs O >= 1 and I >= 1");
            if (shape_size(input) != spec.in)
                fail(ErrorCategory::shape, "affine layer expects " + std::to_string(spec.in) + " inputs, got " +
                                               shape_to_string(input));
            return {spec.out};
        case LayerKind::conv2d: {
            if (spec.in < 1 || spec.out < 1 || spec.kernel < 1)
                fail(ErrorCategory::shape, "conv2d layer needs positive channels and kernel");
            if (input.size() != 3 || input[0] != spec.in)
                fail(ErrorCategory::shape, "conv2d layer expects [" + std::to_string(spec.in) + ",H,W], got " +
                                               shape_to_string(input));
            return {spec.out, conv_output_extent(input[1], spec.kernel, spec.stride, spec.padding),
                    conv_output_extent(input[2], spec.kernel, spec.stride, spec.padding)};
        }
        case LayerKind::batchnorm:
            if (input.empty() || input[0] != spec.in)
                fail(ErrorCategory::shape, "batchnorm over " + std::to_string(spec.in) + " channels got " +
                                               shape_to_string(input));
            return input;
        case LayerKind::relu:
            return input;
        case LayerKind::act_quant:
            if (spec.bits < 2 || spec.bits > 16) fail(ErrorCategory::shape, "act_quant bitwidth must be in [2, 16]");
            return input;
    }
    fail(ErrorCategory::shape, "unknown layer kind");
}

// --- affine / conv --------------------------------------------------------------------------

namespace {

/// Batch rows and features of x, viewed as [N, I].
std::pair<std::size_t, std::size_t> linear_view(const Tensor& x, const Tensor& weight) {
    if (x.rank() < 2 || weight.rank() != 2 || x.size() / x.dim(0) != weight.dim(1))
        fail(ErrorCategory::shape,
             "linear: x " + shape_to_string(x.shape()) + " incompatible with weight " + shape_to_string(weight.shape()));
    return {x.dim(0), weight.dim(1)};
}

}  // namespace

Tensor linear_forward(const Tensor& x, const Tensor& weight) {
    const auto [n, in] = linear_view(x, weight);
    const std::size_t out = weight.dim(0);
    Tensor y({n, out});
    for (std::size_t s = 0; s < n; ++s) {
        const double* xs = x.data() + s * in;
        for (std::size_t o = 0; o < out; ++o) {
            const double* w = weight.data() + o * in;
            double acc = 0.0;
            for (std::size_t i = 0; i < in; ++i) acc += w[i] * xs[i];
            y[s * out + o] = acc;
        }
    }
    return y;
}

void linear_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Tensor* dx, Tensor* dweight) {
    const auto [n, in] = linear_view(x, weight);
    const std::size_t out = weight.dim(0);
    if (dx) {
        *dx = Tensor(x.shape());
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t o = 0; o < out; ++o) {
                const double g = dy[s * out + o];
                const double* w = weight.data() + o * in;
                double* d = dx->data() + s * in;
                for (std::size_t i = 0; i < in; ++i) d[i] += g * w[i];
            }
    }
    if (dweight) {
        *dweight = Tensor({out, in});
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t o = 0; o < out; ++o) {
                const double g = dy[s * out + o];
                const double* xs = x.data() + s * in;
                double* d = dweight->data() + o * in;
                for (std::size_t i = 0; i < in; ++i) d[i] += g * xs[i];
            }
    }
}

Tensor affine_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) fail(ErrorCategory::shape, "affine weight must be [O, I]");
    const std::size_t out = weight.dim(0), in = weight.dim(1);
    if (bias.size() != out)
        fail(ErrorCategory::shape, "affine bias " + shape_to_string(bias.shape()) + " does not match O=" +
                                       std::to_string(out));
    const bool single = x.rank() == 1;
    if (single && x.size() != in)
        fail(ErrorCategory::shape, "affine input " + shape_to_string(x.shape()) + " does not match I=" +
                                       std::to_string(in));
    Tensor batch = single ? x.reshape({1, in}) : x;
    Tensor y = bias_add(linear_forward(batch, weight), bias);
    return single ? y.reshape({out}) : y;
}

namespace {

struct ConvDims {
    std::size_t n, c, h, w, o, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& weight, Conv2dGeometry g) {
    if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1))
        fail(ErrorCategory::shape,
             "conv2d: x " + shape_to_string(x.shape()) + " incompatible with weight " + shape_to_string(weight.shape()));
    ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), 0, 0};
    d.oh = conv_output_extent(d.h, d.kh, g.stride, g.padding);
    d.ow = conv_output_extent(d.w, d.kw, g.stride, g.padding);
    return d;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, Conv2dGeometry g) {
    const ConvDims d = conv_dims(x, weight, g);
    Tensor y({d.n, d.o, d.oh, d.ow});
    const auto pad = static_cast<std::ptrdiff_t>(g.padding);
    for (std::size_t s = 0; s < d.n; ++s)
        for (std::size_t o = 0; o < d.o; ++o)
            for (std::size_t py = 0; py < d.oh; ++py)
                for (std::size_t px = 0; px < d.ow; ++px) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d.c; ++c)
                        for (std::size_t ky = 0; ky < d.kh; ++ky) {
                            const auto iy = static_cast<std::ptrdiff_t>(py * g.stride + ky) - pad;
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                            for (std::size_t kx = 0; kx < d.kw; ++kx) {
                                const auto ix = static_cast<std::ptrdiff_t>(px * g.stride + kx) - pad;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
                                acc += weight[((o * d.c + c) * d.kh + ky) * d.kw + kx] *
                                       x[((s * d.c + c) * d.h + iy) * d.w + ix];
                            }
                        }
                    y[((s * d.o + o) * d.oh + py) * d.ow + px] = acc;
                }
    return y;
}

void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Conv2dGeometry g, Tensor* dx,
                     Tensor* dweight) {
    const ConvDims d = conv_dims(x, weight, g);
    if (dx) *dx = Tensor(x.shape());
    if (dweight) *dweight = Tensor(weight.shape());
    const auto pad = static_cast<std::ptrdiff_t>(g.padding);
    for (std::size_t s = 0; s < d.n; ++s)
        for (std::size_t o = 0; o < d.o; ++o)
            for (std::size_t py = 0; py < d.oh; ++py)
                for (std::size_t px = 0; px < d.ow; ++px) {
                    const double gy = dy[((s * d.o + o) * d.oh + py) * d.ow + px];
                    for (std::size_t c = 0; c < d.c; ++c)
                        for (std::size_t ky = 0; ky < d.kh; ++ky) {
                            const auto iy = static_cast<std::ptrdiff_t>(py * g.stride + ky) - pad;
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                            for (std::size_t kx = 0; kx < d.kw; ++kx) {
                                const auto ix = static_cast<std::ptrdiff_t>(px * g.stride + kx) - pad;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
                                const std::size_t wi = ((o * d.c + c) * d.kh + ky) * d.kw + kx;
                                const std::size_t xi = ((s * d.c + c) * d.h + iy) * d.w + ix;
                                if (dx) (*dx)[xi] += gy * weight[wi];
                                if (dweight) (*dweight)[wi] += gy * x[xi];
                            }
                        }
                }
}

ChannelLayout ChannelLayout::of(const Tensor& x) {
    ChannelLayout l;
    if (x.rank() == 1) {
        l.channels = x.dim(0);
        return l;
    }
    l.outer = x.dim(0);
    l.channels = x.dim(1);
    l.inner = x.size() / (l.outer * l.channels);
    return l;
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
    const ChannelLayout l = ChannelLayout::of(x);
    if (bias.size() != l.channels)
        fail(ErrorCategory::shape,
             "bias " + shape_to_string(bias.shape()) + " does not match channels of " + shape_to_string(x.shape()));
    Tensor y = x;
    for (std::size_t s = 0; s < l.outer; ++s)
        for (std::size_t c = 0; c < l.channels; ++c) {
            double* p = y.data() + (s * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) p[i] += bias[c];
        }
    return y;
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    return y;
}

// --- batch normalization ------------------------------------------------------------------

BNState BNState::identity(std::size_t channels) {
    BNState s;
    s.gamma.assign(channels, 1.0);
    s.beta.assign(channels, 0.0);
    s.running_mean.assign(channels, 0.0);
    s.running_var.assign(channels, 1.0);
    return s;
}

void BNState::validate() const {
    const std::size_t c = gamma.size();
    if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
        fail(ErrorCategory::shape, "BN state vectors have inconsistent channel counts");
    if (!(epsilon > 0.0)) fail(ErrorCategory::numeric, "BN epsilon must be positive");
    if (!(momentum > 0.0 && momentum < 1.0)) fail(ErrorCategory::numeric, "BN momentum must be in (0, 1)");
    for (double v : running_var)
        if (!(v >= 0.0)) fail(ErrorCategory::numeric, "BN running variance must be non-negative");
}

BatchNormForward batch_norm_forward(const Tensor& x, std::span<const double> gamma, std::span<const double> beta,
                                    double epsilon) {
    if (x.rank() < 2) fail(ErrorCategory::shape, "batch normalization in training form needs a batch axis");
    const ChannelLayout l = ChannelLayout::of(x);
    if (l.outer < 2) fail(ErrorCategory::shape, "batch normalization needs batch size >= 2");
    if (gamma.size() != l.channels || beta.size() != l.channels)
        fail(ErrorCategory::shape, "BN parameters do not match " + std::to_string(l.channels) + " channels");

    BatchNormForward out;
    BatchNormCache& cache = out.cache;
    cache.layout = l;
    cache.mean.assign(l.channels, 0.0);
    cache.variance.assign(l.channels, 0.0);
    cache.inv_std.assign(l.channels, 0.0);
    cache.gamma_used.assign(gamma.begin(), gamma.end());
    const double m = static_cast<double>(l.outer * l.inner);

    for (std::size_t c = 0; c < l.channels; ++c) {
        double sum = 0.0;
        for (std::size_t s = 0; s < l.outer; ++s) {
            const double* p = x.data() + (s * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) sum += p[i];
        }
        const double mean = sum / m;
        double sq = 0.0;
        for (std::size_t s = 0; s < l.outer; ++s) {
            const double* p = x.data() + (s * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) sq += (p[i] - mean) * (p[i] - mean);
        }
        cache.mean[c] = mean;
        cache.variance[c] = sq / m;
        cache.inv_std[c] = 1.0 / std::sqrt(cache.variance[c] + epsilon);
    }

    cache.x_hat = Tensor(x.shape());
    out.y = Tensor(x.shape());
    for (std::size_t s = 0; s < l.outer; ++s)
        for (std::size_t c = 0; c < l.channels; ++c) {
            const std::size_t base = (s * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) {
                const double xh = (x[base + i] - cache.mean[c]) * cache.inv_std[c];
                cache.x_hat[base + i] = xh;
                out.y[base + i] = gamma[c] * xh + beta[c];
            }
        }
    return out;
}

BatchNormGrads batch_norm_backward(const BatchNormCache& cache, const Tensor& dy) {
    const ChannelLayout& l = cache.layout;
    if (dy.shape() != cache.x_hat.shape()) fail(ErrorCategory::shape, "BN backward: upstream shape mismatch");
    BatchNormGrads g;
    g.dx = Tensor(dy.shape());
    g.dgamma.assign(l.channels, 0.0);
    g.dbeta.assign(l.channels, 0.0);
    const double m = static_cast<double>(l.outer * l.inner);
    for (std::size_t c = 0; c < l.channels; ++c) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::size_t s = 0; s < l.outer; ++s) {
            const std::size_t base = (s * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) {
                sum_dy += dy[base + i];
                sum_dy_xh += dy[base + i] * cache.x_hat[base + i];
            }
        }
        g.dbeta[c] = sum_dy;
        g.dgamma[c] = sum_dy_xh;
        const double scale = cache.gamma_used[c] * cache.inv_std[c];
        const double mean_dy = sum_dy / m, mean_dy_xh = sum_dy_xh / m;
        for (std::size_t s = 0; s < l.outer; ++s) {
            const std::size_t base = (s * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i)
                g.dx[base + i] = scale * (dy[base + i] - mean_dy - cache.x_hat[base + i] * mean_dy_xh);
        }
    }
    return g;
}

void update_running_stats(BNState& state, const BatchNormCache& cache) {
    const double m = static_cast<double>(cache.layout.outer * cache.layout.inner);
    const double unbias = m / (m - 1.0);
    for (std::size_t c = 0; c < state.channels(); ++c) {
        state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * cache.mean[c];
        state.running_var[c] =
            (1.0 - state.momentum) * state.running_var[c] + state.momentum * cache.variance[c] * unbias;
    }
}

BatchNormTrainResult batchnorm_train(const Tensor& x, const BNState& state) {
    state.validate();
    BatchNormForward fwd = batch_norm_forward(x, state.gamma, state.beta, state.epsilon);
    BatchNormTrainResult r{std::move(fwd.y), state};
    update_running_stats(r.state, fwd.cache);
    return r;
}

Tensor batchnorm_infer(const Tensor& x, const BNState& state) {
    state.validate();
    const ChannelLayout l = ChannelLayout::of(x);
    if (l.channels != state.channels())
        fail(ErrorCategory::shape, "BN over " + std::to_string(state.channels()) + " channels got " +
                                       shape_to_string(x.shape()));
    Tensor y(x.shape());
    for (std::size_t s = 0; s < l.outer; ++s)
        for (std::size_t c = 0; c < l.channels; ++c) {
            const double denom = std::sqrt(state.running_var[c] + state.epsilon);
            const std::size_t base = (s * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i)
                y[base + i] = state.gamma[c] * (x[base + i] - state.running_mean[c]) / denom + state.beta[c];
        }
    return y;
}

// --- activation quantization --------------------------------------------------------------

void ActQuantSpec::validate() const {
    if (bits < 2 || bits > 16) fail(ErrorCategory::shape, "activation bitwidth must be in [2, 16]");
    if (!(range > 0.0) || !is_pow2_value(range))
        fail(ErrorCategory::numeric, "activation range must be a positive power of two");
}

std::int32_t act_quant_code(double x, const ActQuantSpec& spec) noexcept {
    const double levels = spec.levels();
    const double q = std::clamp(round_half_away(x * levels / spec.range), -levels, levels);
    return static_cast<std::int32_t>(q);
}

Tensor act_quant_forward(const Tensor& x, const ActQuantSpec& spec) {
    spec.validate();
    const double step = spec.range / spec.levels();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = act_quant_code(x[i], spec) * step;
    return y;
}

Tensor act_quant_backward(const Tensor& upstream, const Tensor& x, const ActQuantSpec& spec) {
    if (upstream.shape() != x.shape()) fail(ErrorCategory::shape, "act_quant backward: shape mismatch");
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = std::fabs(x[i]) <= spec.range ? upstream[i] : 0.0;
    return g;
}

double act_range_for(double max_abs) noexcept { return max_abs > 0.0 ? pow2_ceil(max_abs) : 1.0; }

}  // namespace lutq
