#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "lutq/layers.hpp"
#include "lutq/lutq.hpp"
#include "lutq/network.hpp"

namespace lutq {

inline constexpr std::uint8_t kFormatVersion = 1;
inline constexpr unsigned kFloatBits = 32;

/// d and A of one quantized layer as stored on disk. Shadow weights are not part of a model file.
struct PackedQuant {
    std::vector<double> dictionary;  // float32-representable
    std::vector<std::uint32_t> assignments;
    DictionaryConstraint constraint;

    friend bool operator==(const PackedQuant&, const PackedQuant&) = default;
};

struct PackedLayer {
    LayerSpec spec;
    std::optional<PackedQuant> quant;  // weighted layers stored as LUT-Q
    Tensor weight;                     // weighted layers stored densely (float32 values)
    Tensor bias;
    BNState bn;
    ActQuantSpec act;

    /// Weights used by the forward pass: d[A] or the dense tensor.
    Tensor weights() const;

    friend bool operator==(const PackedLayer&, const PackedLayer&) = default;
};

struct PackedModel {
    Shape input_shape;
    LossKind loss = LossKind::softmax_cross_entropy;
    std::vector<PackedLayer> layers;

    friend bool operator==(const PackedModel&, const PackedModel&) = default;
};

/// Rounds dictionaries and dense weights to float32 and drops shadow weights.
PackedModel export_model(const Network& net);
/// Quantized layers come back with W = Q as their shadow weights.
Network import_model(const PackedModel& model);

/// Bits per layer as actually written, split by section.
struct LayerPayload {
    std::size_t layer = 0;
    std::uint64_t dictionary_bits = 0;
    std::uint64_t assignment_bits = 0;
    std::uint64_t padding_bits = 0;   // byte alignment of the assignment stream
    std::uint64_t dense_weight_bits = 0;

    std::uint64_t payload_bits() const noexcept { return dictionary_bits + assignment_bits + dense_weight_bits; }
};

struct SerializationStats {
    std::vector<LayerPayload> layers;  // weighted layers only
    std::uint64_t total_bytes = 0;
    std::uint64_t payload_bits() const noexcept;
};

/// K * B_float + N * ceil(log2 K).
std::uint64_t lutq_formula_bits(std::uint64_t k, std::uint64_t n) noexcept;

std::vector<std::uint8_t> serialize(const PackedModel& model, SerializationStats* stats = nullptr);
PackedModel deserialize(std::span<const std::uint8_t> bytes);

void save_model(const PackedModel& model, const std::filesystem::path& path, SerializationStats* stats = nullptr);
PackedModel load_model(const std::filesystem::path& path);

/// Little-endian bit order within bytes; `bits` == 0 writes nothing.
std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> indices, unsigned bits);
std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t count, unsigned bits);

struct LayerFootprint {
    std::size_t layer = 0;
    LayerKind kind = LayerKind::affine;
    std::uint64_t weights = 0;       // N
    std::uint64_t dictionary = 0;    // K, 0 when stored densely
    std::uint64_t bits = 0;
    std::uint64_t baseline_bits = 0; // N * B_float
};

struct FootprintReport {
    std::vector<LayerFootprint> layers;
    std::uint64_t total_bits = 0;
    std::uint64_t baseline_bits = 0;
    bool activations_included = false;
    int activation_bits = 0;
    std::uint64_t activation_peak_bits = 0;  // largest single activation tensor, per sample
    std::uint64_t activation_sum_bits = 0;   // all activation tensors, per sample

    double compression_ratio() const noexcept {
        return total_bits ? static_cast<double>(baseline_bits) / static_cast<double>(total_bits) : 0.0;
    }
};

/// Parameter bits by the LUT-Q formula (K <= N enforced), optionally with activation memory.
FootprintReport footprint_report(const PackedModel& model, bool include_activations = false, int act_bits = 8);

}  // namespace lutq
