#include "lutq/inference.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <optional>

#include "lutq/errors.hpp"
#include "lutq/mlbn.hpp"
#include "lutq/numeric.hpp"

namespace lutq {

__extension__ typedef __int128 i128;

std::string to_string(ExecutionMode mode) {
    switch (mode) {
        case ExecutionMode::dense: return "dense";
        case ExecutionMode::bucket: return "bucket";
        case ExecutionMode::quasi: return "quasi";
        case ExecutionMode::fully: return "fully";
    }
    return "unknown";
}

ExecutionMode parse_execution_mode(std::string_view name) {
    if (name == "dense") return ExecutionMode::dense;
    if (name == "bucket") return ExecutionMode::bucket;
    if (name == "quasi") return ExecutionMode::quasi;
    if (name == "fully" || name == "shift") return ExecutionMode::fully;
    fail(ErrorCategory::usage, "unknown execution mode '" + std::string(name) + "' (dense, bucket, quasi, fully, shift)");
}

OpCounts OpCountReport::totals() const noexcept {
    OpCounts t;
    for (const auto& l : layers) t += l.ops;
    return t;
}

double FixedPointTensor::value(std::size_t i) const { return std::ldexp(static_cast<double>(mantissas.at(i)), exponent); }

Tensor FixedPointTensor::dequantize() const {
    Tensor t(shape);
    for (std::size_t i = 0; i < size(); ++i) t[i] = value(i);
    return t;
}

void FixedPointTensor::validate() const {
    if (width < 2 || width > 32) fail(ErrorCategory::numeric, "fixed-point width must be in 2..32, got " + std::to_string(width));
    if (shape_size(shape) != mantissas.size())
        fail(ErrorCategory::shape, "fixed-point tensor of shape " + shape_to_string(shape) + " holds " +
                                       std::to_string(mantissas.size()) + " mantissas");
    const std::int64_t hi = (std::int64_t{1} << (width - 1)) - 1, lo = -(std::int64_t{1} << (width - 1));
    for (std::int32_t m : mantissas)
        if (m > hi || m < lo)
            fail(ErrorCategory::numeric, "mantissa " + std::to_string(m) + " outside signed " + std::to_string(width) +
                                             "-bit range");
}

Pow2Dictionary decompose_pow2(std::span<const double> d) {
    Pow2Dictionary p;
    p.sign.resize(d.size());
    p.exponent.resize(d.size());
    for (std::size_t k = 0; k < d.size(); ++k) {
        if (d[k] == 0.0) continue;
        if (!is_pow2_value(d[k]))
            fail(ErrorCategory::mode, "dictionary entry " + std::to_string(d[k]) + " is not a power of two");
        p.sign[k] = d[k] > 0 ? 1 : -1;
        p.exponent[k] = std::ilogb(d[k]);
        p.min_exponent = p.any_nonzero ? std::min(p.min_exponent, p.exponent[k]) : p.exponent[k];
        p.any_nonzero = true;
    }
    return p;
}

namespace {

struct AffineView {
    std::size_t n, in;
    bool single;
};

AffineView affine_view(const Shape& shape, std::size_t weights, std::size_t out) {
    if (shape.empty() || out == 0 || weights % out != 0)
        fail(ErrorCategory::shape, "affine: " + std::to_string(weights) + " assignments for " + std::to_string(out) +
                                       " outputs and input " + shape_to_string(shape));
    const std::size_t in = weights / out;
    const bool single = shape.size() == 1;
    const std::size_t n = single ? 1 : shape[0];
    if (shape_size(shape) != n * in)
        fail(ErrorCategory::shape, "affine input " + shape_to_string(shape) + " does not match I=" + std::to_string(in));
    return {n, in, single};
}

void check_assignments(std::span<const std::uint32_t> a, std::size_t k) {
    if (k == 0) fail(ErrorCategory::shape, "empty dictionary");
    for (std::uint32_t v : a)
        if (v >= k) fail(ErrorCategory::shape, "assignment " + std::to_string(v) + " out of range for K=" + std::to_string(k));
}

struct ConvView {
    std::size_t n, c, h, w, o, oh, ow, k, stride, pad;
};

ConvView conv_view(const Shape& shape, std::size_t weights, const LayerSpec& spec) {
    if (spec.kind != LayerKind::conv2d) fail(ErrorCategory::shape, "not a conv2d layer");
    if (shape.size() != 4 || shape[1] != spec.in)
        fail(ErrorCategory::shape, "conv2d input " + shape_to_string(shape) + " does not match " +
                                       std::to_string(spec.in) + " channels");
    if (weights != shape_size(spec.weight_shape())) fail(ErrorCategory::shape, "conv2d assignment count mismatch");
    ConvView v{shape[0], shape[1], shape[2], shape[3], spec.out, 0, 0, spec.kernel, spec.stride, spec.padding};
    v.oh = conv_output_extent(v.h, v.k, v.stride, v.pad);
    v.ow = conv_output_extent(v.w, v.k, v.stride, v.pad);
    return v;
}

// Calls f(weight_index, input_index) for every in-bounds tap of one output position.
template <class F>
void for_each_tap(const ConvView& v, std::size_t s, std::size_t o, std::size_t py, std::size_t px, F&& f) {
    const auto pad = static_cast<std::ptrdiff_t>(v.pad);
    for (std::size_t c = 0; c < v.c; ++c)
        for (std::size_t ky = 0; ky < v.k; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(py * v.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(v.h)) continue;
            for (std::size_t kx = 0; kx < v.k; ++kx) {
                const auto ix = static_cast<std::ptrdiff_t>(px * v.stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(v.w)) continue;
                f(((o * v.c + c) * v.k + ky) * v.k + kx,
                  ((s * v.c + c) * v.h + static_cast<std::size_t>(iy)) * v.w + static_cast<std::size_t>(ix));
            }
        }
}

// One bucket-sum evaluation; `gather(f)` must call f(weight_index, input_index) per input.
class FloatBuckets {
public:
    FloatBuckets(std::span<const double> d, OpCounts& ops) : d_(d), sum_(d.size()), used_(d.size()), ops_(ops) {}

    template <class Gather>
    double eval(const double* x, Gather&& gather, std::span<const std::uint32_t> a) {
        std::fill(sum_.begin(), sum_.end(), 0.0);
        std::fill(used_.begin(), used_.end(), 0);
        gather([&](std::size_t wi, std::size_t xi) {
            const std::uint32_t k = a[wi];
            if (d_[k] == 0.0) return;
            sum_[k] += x[xi];
            used_[k] = 1;
            ++ops_.additions;
        });
        double acc = 0.0;
        for (std::size_t k = 0; k < d_.size(); ++k) {
            if (!used_[k]) continue;
            acc += d_[k] * sum_[k];
            ++ops_.multiplications;
            ++ops_.additions;
            ++ops_.lookups;
        }
        return acc;
    }

private:
    std::span<const double> d_;
    std::vector<double> sum_;
    std::vector<char> used_;
    OpCounts& ops_;
};

class ShiftBuckets {
public:
    ShiftBuckets(const Pow2Dictionary& p, OpCounts& ops) : p_(p), sum_(p.sign.size()), used_(p.sign.size()), ops_(ops) {}

    template <class Gather>
    std::int32_t eval(const std::int32_t* x, Gather&& gather, std::span<const std::uint32_t> a) {
        std::fill(sum_.begin(), sum_.end(), 0);
        std::fill(used_.begin(), used_.end(), 0);
        gather([&](std::size_t wi, std::size_t xi) {
            const std::uint32_t k = a[wi];
            if (p_.sign[k] == 0) return;
            sum_[k] += x[xi];
            used_[k] = 1;
            ++ops_.additions;
        });
        std::int64_t acc = 0;
        for (std::size_t k = 0; k < sum_.size(); ++k) {
            if (!used_[k]) continue;
            const int shift = p_.exponent[k] - p_.min_exponent;
            const std::int64_t mag = sum_[k] < 0 ? -sum_[k] : sum_[k];
            if (mag > INT32_MAX || (mag != 0 && (shift >= 31 || mag > (std::int64_t{INT32_MAX} >> shift))))
                fail(ErrorCategory::numeric, "bucket sum " + std::to_string(sum_[k]) + " shifted by " +
                                                 std::to_string(shift) + " overflows the 32-bit accumulator");
            acc += p_.sign[k] * (sum_[k] * (std::int64_t{1} << shift));  // the shift, written portably
            if (acc > INT32_MAX || acc < INT32_MIN)
                fail(ErrorCategory::numeric, "accumulator overflow (" + std::to_string(acc) + ")");
            ++ops_.shifts;
            ++ops_.additions;
            ++ops_.lookups;
        }
        return static_cast<std::int32_t>(acc);
    }

private:
    const Pow2Dictionary& p_;
    std::vector<std::int64_t> sum_;
    std::vector<char> used_;
    OpCounts& ops_;
};

}  // namespace

Tensor bucket_sum_affine(const Tensor& x, std::span<const double> d, std::span<const std::uint32_t> a,
                         std::size_t out, OpCounts* ops) {
    const AffineView v = affine_view(x.shape(), a.size(), out);
    check_assignments(a, d.size());
    OpCounts local;
    FloatBuckets buckets(d, local);
    Tensor y(v.single ? Shape{out} : Shape{v.n, out});
    for (std::size_t s = 0; s < v.n; ++s)
        for (std::size_t o = 0; o < out; ++o)
            y[s * out + o] = buckets.eval(
                x.data() + s * v.in,
                [&](auto&& f) {
                    for (std::size_t i = 0; i < v.in; ++i) f(o * v.in + i, i);
                },
                a);
    if (ops) *ops += local;
    return y;
}

Tensor bucket_sum_conv2d(const Tensor& x, std::span<const double> d, std::span<const std::uint32_t> a,
                         const LayerSpec& spec, OpCounts* ops) {
    const ConvView v = conv_view(x.shape(), a.size(), spec);
    check_assignments(a, d.size());
    OpCounts local;
    FloatBuckets buckets(d, local);
    Tensor y({v.n, v.o, v.oh, v.ow});
    for (std::size_t s = 0; s < v.n; ++s)
        for (std::size_t o = 0; o < v.o; ++o)
            for (std::size_t py = 0; py < v.oh; ++py)
                for (std::size_t px = 0; px < v.ow; ++px)
                    y[((s * v.o + o) * v.oh + py) * v.ow + px] = buckets.eval(
                        x.data(), [&](auto&& f) { for_each_tap(v, s, o, py, px, f); }, a);
    if (ops) *ops += local;
    return y;
}

FixedPointTensor shift_affine(const FixedPointTensor& x, std::span<const double> d,
                              std::span<const std::uint32_t> a, std::size_t out, OpCounts* ops) {
    x.validate();
    const AffineView v = affine_view(x.shape, a.size(), out);
    check_assignments(a, d.size());
    const Pow2Dictionary p = decompose_pow2(d);
    OpCounts local;
    ShiftBuckets buckets(p, local);
    FixedPointTensor y{v.single ? Shape{out} : Shape{v.n, out}, std::vector<std::int32_t>(v.n * out),
                       x.exponent + (p.any_nonzero ? p.min_exponent : 0), 32};
    for (std::size_t s = 0; s < v.n; ++s)
        for (std::size_t o = 0; o < out; ++o)
            y.mantissas[s * out + o] = buckets.eval(
                x.mantissas.data() + s * v.in,
                [&](auto&& f) {
                    for (std::size_t i = 0; i < v.in; ++i) f(o * v.in + i, i);
                },
                a);
    if (ops) *ops += local;
    return y;
}

FixedPointTensor shift_conv2d(const FixedPointTensor& x, std::span<const double> d,
                              std::span<const std::uint32_t> a, const LayerSpec& spec, OpCounts* ops) {
    x.validate();
    const ConvView v = conv_view(x.shape, a.size(), spec);
    check_assignments(a, d.size());
    const Pow2Dictionary p = decompose_pow2(d);
    OpCounts local;
    ShiftBuckets buckets(p, local);
    FixedPointTensor y{{v.n, v.o, v.oh, v.ow}, std::vector<std::int32_t>(v.n * v.o * v.oh * v.ow),
                       x.exponent + (p.any_nonzero ? p.min_exponent : 0), 32};
    for (std::size_t s = 0; s < v.n; ++s)
        for (std::size_t o = 0; o < v.o; ++o)
            for (std::size_t py = 0; py < v.oh; ++py)
                for (std::size_t px = 0; px < v.ow; ++px)
                    y.mantissas[((s * v.o + o) * v.oh + py) * v.ow + px] = buckets.eval(
                        x.mantissas.data(), [&](auto&& f) { for_each_tap(v, s, o, py, px, f); }, a);
    if (ops) *ops += local;
    return y;
}

// --- whole-model execution ------------------------------------------------------------------

namespace {

std::string layer_name(const PackedModel& m, std::size_t i) {
    return "layer " + std::to_string(i) + " (" + to_string(m.layers[i].spec.kind) + ")";
}

[[noreturn]] void mode_error(const PackedModel& m, std::size_t i, ExecutionMode mode, const std::string& why) {
    fail(ErrorCategory::mode, to_string(mode) + " mode: " + layer_name(m, i) + " " + why);
}

// A quantized affine/conv layer fed by an act_quant layer, followed by optional BN and ReLU, ending at the
// next act_quant layer or at the network output.
struct Segment {
    std::size_t weighted = 0;
    std::optional<std::size_t> bn;
    bool relu = false;
    std::optional<std::size_t> next_quant;
};

std::vector<Segment> shift_segments(const PackedModel& m, ExecutionMode mode) {
    const auto& L = m.layers;
    if (L.front().spec.kind != LayerKind::act_quant)
        mode_error(m, 0, mode, "must be an act_quant layer that encodes the input");
    const int bits = L.front().act.bits;
    std::vector<Segment> segs;
    std::size_t p = 0;
    while (p + 1 < L.size()) {
        Segment s;
        s.weighted = p + 1;
        const PackedLayer& w = L[s.weighted];
        if (!w.spec.has_weights()) mode_error(m, s.weighted, mode, "must be affine/conv2d after an act_quant layer");
        if (!w.quant) mode_error(m, s.weighted, mode, "stores dense weights; shift modes need a LUT-Q dictionary");
        try {
            decompose_pow2(w.quant->dictionary);
        } catch (const Error& e) {
            mode_error(m, s.weighted, mode, std::string(e.what()) + "; use bucket mode");
        }
        std::size_t q = s.weighted + 1;
        if (q < L.size() && L[q].spec.kind == LayerKind::batchnorm) {
            if (mode == ExecutionMode::fully && L[q].spec.bn_mode != BatchNormMode::multiplier_less)
                mode_error(m, q, mode, "is a standard BN; fully multiplier-less execution needs multiplier-less BN");
            s.bn = q++;
        }
        if (q < L.size() && L[q].spec.kind == LayerKind::relu) {
            s.relu = true;
            ++q;
        }
        if (q < L.size()) {
            if (L[q].spec.kind != LayerKind::act_quant)
                mode_error(m, q, mode, "cannot follow this affine/BN/ReLU chain; an act_quant layer is required");
            if (L[q].act.bits != bits)
                mode_error(m, q, mode, "uses " + std::to_string(L[q].act.bits) + "-bit activations, the input uses " +
                                           std::to_string(bits));
            s.next_quant = q;
        }
        segs.push_back(s);
        if (!s.next_quant) return segs;
        p = q;
    }
    return segs;
}

// Dense kernels with the same summation order as the training-side forward pass.
Tensor dense_affine(const Tensor& x, const Tensor& w, bool lookups, OpCounts& ops) {
    const std::size_t out = w.dim(0), in = w.dim(1), n = x.dim(0);
    if (x.size() != n * in) fail(ErrorCategory::shape, "affine input " + shape_to_string(x.shape()) + " does not match I");
    Tensor y({n, out});
    for (std::size_t s = 0; s < n; ++s) {
        const double* xs = x.data() + s * in;
        for (std::size_t o = 0; o < out; ++o) {
            const double* wo = w.data() + o * in;
            double acc = 0.0;
            for (std::size_t i = 0; i < in; ++i) {
                acc += wo[i] * xs[i];
                ++ops.multiplications;
                ++ops.additions;
            }
            y[s * out + o] = acc;
        }
    }
    if (lookups) ops.lookups += n * out * in;
    return y;
}

Tensor dense_conv2d(const Tensor& x, const Tensor& w, const LayerSpec& spec, bool lookups, OpCounts& ops) {
    const ConvView v = conv_view(x.shape(), w.size(), spec);
    Tensor y({v.n, v.o, v.oh, v.ow});
    for (std::size_t s = 0; s < v.n; ++s)
        for (std::size_t o = 0; o < v.o; ++o)
            for (std::size_t py = 0; py < v.oh; ++py)
                for (std::size_t px = 0; px < v.ow; ++px) {
                    double acc = 0.0;
                    for_each_tap(v, s, o, py, px, [&](std::size_t wi, std::size_t xi) {
                        acc += w[wi] * x[xi];
                        ++ops.multiplications;
                        ++ops.additions;
                        if (lookups) ++ops.lookups;
                    });
                    y[((s * v.o + o) * v.oh + py) * v.ow + px] = acc;
                }
    return y;
}

Tensor counted_bias(const Tensor& x, const Tensor& bias, OpCounts& ops) {
    ops.additions += x.size();
    return bias_add(x, bias);
}

Tensor counted_bn(const PackedLayer& l, const Tensor& x, OpCounts& ops) {
    ops.multiplications += x.size();
    ops.additions += x.size();
    return l.spec.bn_mode == BatchNormMode::multiplier_less ? mlbn_infer(x, fold_mlbn(l.bn))
                                                            : folded_bn_infer(x, fold_bn(l.bn));
}

Tensor run_float(const PackedModel& m, const Tensor& batch, ExecutionMode mode, OpCountReport& rep) {
    Tensor x = batch;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const PackedLayer& l = m.layers[i];
        OpCounts& ops = rep.layers[i].ops;
        switch (l.spec.kind) {
            case LayerKind::affine: {
                const Tensor flat = x.reshape({x.dim(0), x.size() / x.dim(0)});
                Tensor y = mode == ExecutionMode::bucket
                               ? bucket_sum_affine(flat, l.quant->dictionary, l.quant->assignments, l.spec.out, &ops)
                               : dense_affine(flat, l.weights(), l.quant.has_value(), ops);
                x = counted_bias(y, l.bias, ops);
                break;
            }
            case LayerKind::conv2d: {
                Tensor y = mode == ExecutionMode::bucket
                               ? bucket_sum_conv2d(x, l.quant->dictionary, l.quant->assignments, l.spec, &ops)
                               : dense_conv2d(x, l.weights(), l.spec, l.quant.has_value(), ops);
                x = counted_bias(y, l.bias, ops);
                break;
            }
            case LayerKind::batchnorm: x = counted_bn(l, x, ops); break;
            case LayerKind::relu: x = relu(x); break;
            case LayerKind::act_quant:
                // Scale into code units and back out.
                ops.multiplications += 2 * x.size();
                x = act_quant_forward(x, l.act);
                break;
        }
        require_finite(x, layer_name(m, i));
    }
    return x;
}

constexpr int kFracBits = 32;

i128 round_fixed(i128 t) {
    const i128 half = i128{1} << (kFracBits - 1);
    return t >= 0 ? (t + half) >> kFracBits : -((-t + half) >> kFracBits);
}

Tensor run_shift(const PackedModel& m, const Tensor& batch, ExecutionMode mode, OpCountReport& rep) {
    const std::vector<Segment> segs = shift_segments(m, mode);
    const ActQuantSpec& in = m.layers.front().act;

    // Input encoding (I/O boundary, not counted).
    FixedPointTensor codes{batch.shape(), std::vector<std::int32_t>(batch.size()), 0, in.bits};
    for (std::size_t i = 0; i < batch.size(); ++i) codes.mantissas[i] = act_quant_code(batch[i], in);
    double step = in.range / in.levels();
    int range_exp = std::ilogb(in.range);

    for (const Segment& seg : segs) {
        const PackedLayer& wl = m.layers[seg.weighted];
        OpCounts& wops = rep.layers[seg.weighted].ops;
        FixedPointTensor acc;
        if (wl.spec.kind == LayerKind::affine) {
            FixedPointTensor flat = std::move(codes);
            flat.shape = {flat.shape[0], flat.size() / flat.shape[0]};
            acc = shift_affine(flat, wl.quant->dictionary, wl.quant->assignments, wl.spec.out, &wops);
        } else {
            acc = shift_conv2d(codes, wl.quant->dictionary, wl.quant->assignments, wl.spec, &wops);
        }

        const std::size_t channels = wl.spec.out;
        std::vector<double> alpha(channels, 1.0), offset(channels, 0.0);
        if (seg.bn) {
            const PackedLayer& bl = m.layers[*seg.bn];
            if (bl.spec.bn_mode == BatchNormMode::multiplier_less) {
                const FoldedBN f = fold_mlbn(bl.bn);
                alpha = f.pow2_scale;
                offset = f.offset;
            } else {
                const ScaleOffset f = fold_bn(bl.bn);
                alpha = f.scale;
                offset = f.offset;
            }
        }
        const bool multiply = seg.bn && mode == ExecutionMode::quasi;
        const ActQuantSpec* out_q = seg.next_quant ? &m.layers[*seg.next_quant].act : nullptr;
        const double out_step = out_q ? out_q->range / out_q->levels() : step;
        const int ratio_exp = out_q ? range_exp - std::ilogb(out_q->range) : 0;  // log2(step / out_step)

        // Per-channel constants, computed once per model and not counted as inference work.
        std::vector<double> c_units(channels), mult(channels);
        std::vector<int> sign(channels), shift(channels);
        std::vector<i128> c_fixed(channels);
        for (std::size_t c = 0; c < channels; ++c) {
            c_units[c] = (alpha[c] * wl.bias[c] + offset[c]) / out_step;
            if (std::fabs(c_units[c]) >= 0x1p60)
                fail(ErrorCategory::numeric, layer_name(m, seg.weighted) + ": offset too large for fixed point");
            c_fixed[c] = static_cast<i128>(std::llround(std::ldexp(c_units[c], kFracBits)));
            if (multiply) {
                mult[c] = alpha[c] * std::ldexp(step, acc.exponent) / out_step;
            } else {
                sign[c] = alpha[c] == 0.0 ? 0 : (alpha[c] > 0 ? 1 : -1);
                shift[c] = sign[c] ? std::ilogb(alpha[c]) + acc.exponent + ratio_exp : 0;
                if (sign[c] && (shift[c] + kFracBits < 0 || shift[c] + kFracBits > 94))
                    fail(ErrorCategory::numeric, layer_name(m, seg.weighted) + ": shift of " +
                                                     std::to_string(shift[c]) + " bits exceeds the fixed-point range");
            }
        }

        OpCounts& scale_ops = rep.layers[seg.bn ? *seg.bn : seg.weighted].ops;
        OpCounts& round_ops = rep.layers[seg.next_quant ? *seg.next_quant : seg.weighted].ops;
        const std::size_t inner = acc.size() / (acc.shape[0] * channels);

        if (!out_q) {
            // Output decoding: T is in units of `step`; the final scaling is not counted.
            Tensor y(acc.shape);
            for (std::size_t i = 0; i < acc.size(); ++i) {
                const std::size_t c = (i / inner) % channels;
                double t;
                if (multiply) {
                    t = acc.mantissas[i] * mult[c];
                    ++scale_ops.multiplications;
                } else if (sign[c]) {
                    t = sign[c] * std::ldexp(static_cast<double>(acc.mantissas[i]), shift[c]);
                    ++scale_ops.shifts;
                } else {
                    t = 0.0;
                }
                t += c_units[c];
                ++scale_ops.additions;
                if (seg.relu) t = std::max(t, 0.0);
                y[i] = t * step;
            }
            return y;
        }

        const i128 levels = out_q->levels();
        FixedPointTensor next{acc.shape, std::vector<std::int32_t>(acc.size()), 0, out_q->bits};
        for (std::size_t i = 0; i < acc.size(); ++i) {
            const std::size_t c = (i / inner) % channels;
            const i128 a = acc.mantissas[i];
            i128 t;
            if (multiply) {
                t = static_cast<i128>(std::ldexp(static_cast<double>(acc.mantissas[i]) * mult[c], kFracBits));
                ++scale_ops.multiplications;
            } else if (sign[c]) {
                t = sign[c] * (a << (shift[c] + kFracBits));
                ++scale_ops.shifts;
            } else {
                t = 0;
            }
            t += c_fixed[c];
            ++scale_ops.additions;
            i128 code = round_fixed(t);
            round_ops.additions += 1;
            round_ops.shifts += 1;
            code = std::clamp(code, -levels, levels);
            if (seg.relu && code < 0) code = 0;
            next.mantissas[i] = static_cast<std::int32_t>(code);
        }
        codes = std::move(next);
        step = out_step;
        range_exp = std::ilogb(out_q->range);
    }

    // The network ends with an act_quant layer: decode its codes.
    Tensor y(codes.shape);
    for (std::size_t i = 0; i < codes.size(); ++i) y[i] = codes.mantissas[i] * step;
    return y;
}

}  // namespace

void check_mode(const PackedModel& m, ExecutionMode mode) {
    if (m.layers.empty()) fail(ErrorCategory::mode, "model has no layers");
    switch (mode) {
        case ExecutionMode::dense: return;
        case ExecutionMode::bucket:
            for (std::size_t i = 0; i < m.layers.size(); ++i)
                if (m.layers[i].spec.has_weights() && !m.layers[i].quant)
                    mode_error(m, i, mode, "stores dense weights; bucket mode needs a LUT-Q dictionary");
            return;
        case ExecutionMode::quasi:
        case ExecutionMode::fully: shift_segments(m, mode); return;
    }
}

InferenceResult run_inference(const PackedModel& m, const Tensor& batch, ExecutionMode mode) {
    check_mode(m, mode);
    Shape expected{batch.rank() ? batch.dim(0) : 0};
    expected.insert(expected.end(), m.input_shape.begin(), m.input_shape.end());
    if (batch.shape() != expected)
        fail(ErrorCategory::shape, "batch shape " + shape_to_string(batch.shape()) + " does not match model input " +
                                       shape_to_string(m.input_shape));
    InferenceResult r;
    r.ops.mode = mode;
    r.ops.samples = batch.dim(0);
    for (std::size_t i = 0; i < m.layers.size(); ++i) r.ops.layers.push_back({i, m.layers[i].spec.kind, {}});
    if (mode == ExecutionMode::dense || mode == ExecutionMode::bucket) {
        r.output = run_float(m, batch, mode, r.ops);
    } else {
        r.output = run_shift(m, batch, mode, r.ops);
        Shape out{batch.dim(0)};
        Shape s = m.input_shape;
        for (const auto& l : m.layers) s = layer_output_shape(l.spec, s);
        out.insert(out.end(), s.begin(), s.end());
        r.output = r.output.reshape(out);
    }
    return r;
}

std::vector<std::size_t> argmax_rows(const Tensor& out) {
    const std::size_t n = out.dim(0), c = out.size() / n;
    std::vector<std::size_t> labels(n);
    for (std::size_t s = 0; s < n; ++s) {
        const double* row = out.data() + s * c;
        labels[s] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    }
    return labels;
}

}  // namespace lutq
