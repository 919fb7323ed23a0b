#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "lutq/dataset.hpp"
#include "lutq/layers.hpp"
#include "lutq/lutq.hpp"
#include "lutq/network.hpp"

namespace lutq {

struct LayerQuantPlan {
    std::size_t k = 16;
    DictionaryConstraint constraint;
    std::size_t iterations = 1;  // M

    friend bool operator==(const LayerQuantPlan&, const LayerQuantPlan&) = default;
};

/// Defaults for every weighted layer plus per-layer overrides keyed by layer index.
struct QuantizationPlan {
    bool enabled = false;
    std::size_t k = 16;  // 0: one dictionary entry per weight
    DictionaryConstraint constraint;
    std::size_t iterations = 1;
    std::map<std::size_t, std::size_t> k_overrides;
    std::map<std::size_t, DictionaryConstraint> constraint_overrides;
    std::map<std::size_t, std::size_t> iteration_overrides;
    std::set<std::size_t> skip;  // weighted layers kept in full precision
    std::size_t start_epoch = 0;  // full-precision epochs before quantization starts

    /// Per weighted layer plan; throws a config Error when an override names a layer without weights.
    std::map<std::size_t, LayerQuantPlan> resolve(const std::vector<LayerSpec>& layers) const;
};

struct OptimizerConfig {
    double learning_rate = 0.1;
    double lr_decay = 1.0;           // step decay factor
    std::size_t lr_decay_every = 0;  // epochs; 0 keeps the rate constant
    std::size_t epochs = 20;
    std::size_t batch_size = 32;

    /// Rate used during `epoch` (1-based).
    double rate_at(std::size_t epoch) const;
};

struct SweepConfig {
    std::vector<double> ratios;
    std::vector<unsigned> bits;  // 0: K equals the number of weights
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;
    DataSource data;
    std::optional<std::uint64_t> data_seed;  // defaults to seed
    std::vector<std::string> layers;         // layer tokens, see build_layers
    LossKind loss = LossKind::softmax_cross_entropy;
    int activation_bits = 8;
    BatchNormMode bn_mode = BatchNormMode::standard;
    OptimizerConfig optimizer;
    QuantizationPlan quant;
    SweepConfig sweep;

    DataSource data_source() const;
    void validate() const;
};

/// INI text with sections experiment, data, network, train, quantize, sweep. Unknown keys are errors.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// unconstrained | pow2 | binary | ternary | fixed:v1,v2,... | pruned:p[:inner]
DictionaryConstraint parse_constraint(std::string_view text);

/// Tokens: act_quant[:bits] | affine:out | conv2d:out:k[:stride[:pad]] | batchnorm[:standard|mlbn] | relu.
/// Input sizes follow from `input`; conv outputs are flattened implicitly by a following affine.
std::vector<LayerSpec> build_layers(const std::vector<std::string>& tokens, const Shape& input, int activation_bits,
                                    BatchNormMode bn_mode);

}  // namespace lutq
