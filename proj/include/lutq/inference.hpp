#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lutq/packed_model.hpp"

namespace lutq {

/// dense: float weights Q. bucket: K multiplies per output. quasi: shifts in affine/conv layers,
/// BN multiplies. fully: shifts everywhere, BN scales must be powers of two.
enum class ExecutionMode : std::uint8_t { dense = 0, bucket = 1, quasi = 2, fully = 3 };

std::string to_string(ExecutionMode mode);
/// Accepts dense, bucket, quasi, fully; "shift" means fully.
ExecutionMode parse_execution_mode(std::string_view name);

struct OpCounts {
    std::uint64_t multiplications = 0;
    std::uint64_t shifts = 0;
    std::uint64_t additions = 0;
    std::uint64_t lookups = 0;

    OpCounts& operator+=(const OpCounts& o) noexcept {
        multiplications += o.multiplications;
        shifts += o.shifts;
        additions += o.additions;
        lookups += o.lookups;
        return *this;
    }
    friend bool operator==(const OpCounts&, const OpCounts&) = default;
};

struct LayerOpCounts {
    std::size_t layer = 0;
    LayerKind kind = LayerKind::affine;
    OpCounts ops;
};

struct OpCountReport {
    ExecutionMode mode = ExecutionMode::dense;
    std::size_t samples = 0;  // counts are summed over the batch
    std::vector<LayerOpCounts> layers;

    OpCounts totals() const noexcept;
};

/// value = mantissa * 2^exponent, mantissas within a signed `width`-bit range.
struct FixedPointTensor {
    Shape shape;
    std::vector<std::int32_t> mantissas;
    int exponent = 0;
    int width = 32;

    std::size_t size() const noexcept { return mantissas.size(); }
    double value(std::size_t i) const;
    Tensor dequantize() const;
    void validate() const;
};

/// Per nonzero dictionary entry d_k = sign_k * 2^exponent_k.
struct Pow2Dictionary {
    std::vector<int> sign;  // 0 for a zero entry
    std::vector<int> exponent;
    int min_exponent = 0;   // over nonzero entries
    bool any_nonzero = false;
};

/// Throws a mode error when an entry is neither zero nor +-2^b.
Pow2Dictionary decompose_pow2(std::span<const double> dictionary);

/// y_o = sum_k d_k * (sum_{i: A_oi = k} x_i); zero entries are skipped. x: [I] or [N, I].
Tensor bucket_sum_affine(const Tensor& x, std::span<const double> dictionary,
                         std::span<const std::uint32_t> assignments, std::size_t out, OpCounts* ops = nullptr);
/// Bucket sums over each receptive field (padding taps contribute nothing). x: [N, C, H, W].
Tensor bucket_sum_conv2d(const Tensor& x, std::span<const double> dictionary,
                         std::span<const std::uint32_t> assignments, const LayerSpec& spec, OpCounts* ops = nullptr);

/// Bucket sums of integer mantissas, each shifted by its entry's exponent relative to the smallest one.
/// Output exponent = x.exponent + min exponent; 32-bit accumulators, overflow is a numeric error.
FixedPointTensor shift_affine(const FixedPointTensor& x, std::span<const double> dictionary,
                              std::span<const std::uint32_t> assignments, std::size_t out, OpCounts* ops = nullptr);
FixedPointTensor shift_conv2d(const FixedPointTensor& x, std::span<const double> dictionary,
                              std::span<const std::uint32_t> assignments, const LayerSpec& spec,
                              OpCounts* ops = nullptr);

/// Throws a mode error naming the offending layer when `mode` cannot run `model`.
void check_mode(const PackedModel& model, ExecutionMode mode);

struct InferenceResult {
    Tensor output;
    OpCountReport ops;
};

/// batch: [N, input...]. In quasi/fully mode the first act_quant encodes the input and the output is
/// decoded to floats; neither conversion is counted.
InferenceResult run_inference(const PackedModel& model, const Tensor& batch, ExecutionMode mode);

std::vector<std::size_t> argmax_rows(const Tensor& output);

}  // namespace lutq
