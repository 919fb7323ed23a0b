#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lutq/tensor.hpp"

namespace lutq {

enum class LayerKind : std::uint8_t { affine = 1, conv2d = 2, batchnorm = 3, relu = 4, act_quant = 5 };
enum class BatchNormMode : std::uint8_t { standard = 0, multiplier_less = 1 };

std::string to_string(LayerKind kind);
std::string to_string(BatchNormMode mode);

/// One layer of a network description. Dimensions not used by a kind are ignored.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t out = 0;       // O (affine outputs, conv output channels)
    std::size_t in = 0;        // I (affine inputs, conv input channels, BN channels)
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
    int bits = 8;              // act_quant bitwidth
    BatchNormMode bn_mode = BatchNormMode::standard;

    static LayerSpec affine(std::size_t in, std::size_t out);
    static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                            std::size_t stride = 1, std::size_t padding = 0);
    static LayerSpec batchnorm(std::size_t channels, BatchNormMode mode = BatchNormMode::standard);
    static LayerSpec relu();
    static LayerSpec act_quant(int bits = 8);

    bool has_weights() const noexcept { return kind == LayerKind::affine || kind == LayerKind::conv2d; }

    /// Shape of the weight tensor: [O, I] or [O, C, k, k].
    Shape weight_shape() const;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Per-sample output shape; throws a shape Error when the layer does not fit `input`.
Shape layer_output_shape(const LayerSpec& spec, const Shape& input);

struct Conv2dGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

// --- affine / conv kernels ----------------------------------------------------------------

/// y = W x + bias for x of shape [I] or [N, I].
Tensor affine_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// x [N, ...] (flattened to [N, I]) times weight [O, I] transposed -> [N, O].
Tensor linear_forward(const Tensor& x, const Tensor& weight);
void linear_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Tensor* dx, Tensor* dweight);

/// x [N, C, H, W], weight [O, C, kh, kw] -> [N, O, H', W'].
Tensor conv2d_forward(const Tensor& x, const Tensor& weight, Conv2dGeometry geometry);
void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Conv2dGeometry geometry, Tensor* dx,
                     Tensor* dweight);

/// Adds bias[c] along channel axis 1 (or axis 0 for rank-1 input).
Tensor bias_add(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);

// --- batch normalization ------------------------------------------------------------------

struct BNState {
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double epsilon = 1e-5;
    double momentum = 0.1;

    /// gamma = 1, beta = 0, mean = 0, var = 1.
    static BNState identity(std::size_t channels);
    std::size_t channels() const noexcept { return gamma.size(); }
    void validate() const;

    friend bool operator==(const BNState&, const BNState&) = default;
};

/// Splits a tensor as [outer, channels, inner]; rank 1 is a single sample with channels on axis 0.
struct ChannelLayout {
    std::size_t outer = 1;
    std::size_t channels = 0;
    std::size_t inner = 1;

    static ChannelLayout of(const Tensor& x);
};

/// Everything the batch-statistics backward pass needs.
struct BatchNormCache {
    ChannelLayout layout;
    Tensor x_hat;
    std::vector<double> mean;
    std::vector<double> variance;  // biased batch variance
    std::vector<double> inv_std;
    std::vector<double> gamma_used;
};

struct BatchNormForward {
    Tensor y;
    BatchNormCache cache;
};

struct BatchNormGrads {
    Tensor dx;
    std::vector<double> dgamma;
    std::vector<double> dbeta;
};

/// Normalizes with batch statistics, then scales by gamma and shifts by beta.
BatchNormForward batch_norm_forward(const Tensor& x, std::span<const double> gamma, std::span<const double> beta,
                                    double epsilon);
BatchNormGrads batch_norm_backward(const BatchNormCache& cache, const Tensor& dy);

/// Folds batch statistics into the running estimates (running variance uses the unbiased estimate).
void update_running_stats(BNState& state, const BatchNormCache& cache);

struct BatchNormTrainResult {
    Tensor y;
    BNState state;
};

BatchNormTrainResult batchnorm_train(const Tensor& x, const BNState& state);
Tensor batchnorm_infer(const Tensor& x, const BNState& state);

// --- activation quantization --------------------------------------------------------------

/// Symmetric signed grid with 2^(bits-1)-1 positive levels over [-range, range].
struct ActQuantSpec {
    int bits = 8;
    double range = 1.0;  // power of two

    int levels() const noexcept { return (1 << (bits - 1)) - 1; }
    void validate() const;

    friend bool operator==(const ActQuantSpec&, const ActQuantSpec&) = default;
};

/// Integer grid index round(x * levels / range), saturated.
std::int32_t act_quant_code(double x, const ActQuantSpec& spec) noexcept;

Tensor act_quant_forward(const Tensor& x, const ActQuantSpec& spec);

/// Straight-through gradient masked to |x| <= range.
Tensor act_quant_backward(const Tensor& upstream, const Tensor& x, const ActQuantSpec& spec);

/// Smallest power of two >= max_abs; 1 when max_abs is zero.
double act_range_for(double max_abs) noexcept;

}  // namespace lutq
