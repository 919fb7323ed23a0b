#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "lutq/autodiff.hpp"
#include "lutq/layers.hpp"
#include "lutq/lutq.hpp"
#include "lutq/mlbn.hpp"

namespace lutq {

enum class LossKind : std::uint8_t { softmax_cross_entropy = 0, squared_error = 1 };

struct LayerParams {
    Tensor weight;  // full-precision weights of an unquantized layer
    Tensor bias;
    BNState bn;
    ActQuantSpec act;
    std::optional<QuantizedLayerState> quant;  // owns the shadow weights once quantized
};

/// A feed-forward stack of layers with parameters, trainable in full precision or with LUT-Q.
class Network {
public:
    Network() = default;
    /// He-normal weights from `seed`, zero biases, identity BN.
    Network(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed,
            LossKind loss = LossKind::softmax_cross_entropy);

    const Shape& input_shape() const noexcept { return input_shape_; }
    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    std::size_t size() const noexcept { return layers_.size(); }
    const LayerSpec& spec(std::size_t i) const { return layers_.at(i); }
    LayerParams& params(std::size_t i) { return params_.at(i); }
    const LayerParams& params(std::size_t i) const { return params_.at(i); }
    LossKind loss() const noexcept { return loss_; }

    /// Per-sample shape entering layer i (i == size() gives the network output).
    const Shape& activation_shape(std::size_t i) const { return shapes_.at(i); }
    const Shape& output_shape() const { return shapes_.back(); }

    bool is_quantized(std::size_t i) const { return params(i).quant.has_value(); }
    /// W: the full-precision (shadow) weights.
    const Tensor& shadow_weights(std::size_t i) const;
    Tensor& shadow_weights(std::size_t i);
    /// Weights used in the forward pass: Q = d[A] when quantized, W otherwise.
    Tensor forward_weights(std::size_t i) const;

    /// Replaces layer i's weights by a LUT-Q state initialized from the current W.
    void quantize_layer(std::size_t i, std::size_t k, const DictionaryConstraint& constraint);

    /// Inference-semantics forward pass (running BN statistics, tied weights). batch: [N, input...].
    Tensor forward(const Tensor& batch) const;
    std::vector<std::size_t> predict(const Tensor& batch) const;

    /// Rounds every dictionary entry to the nearest float32, matching what the model file stores.
    void round_dictionaries_to_float32();

    static std::string weight_name(std::size_t i) { return "L" + std::to_string(i) + ".weight"; }
    static std::string bias_name(std::size_t i) { return "L" + std::to_string(i) + ".bias"; }
    static std::string gamma_name(std::size_t i) { return "L" + std::to_string(i) + ".gamma"; }
    static std::string beta_name(std::size_t i) { return "L" + std::to_string(i) + ".beta"; }

private:
    Shape input_shape_;
    std::vector<LayerSpec> layers_;
    std::vector<LayerParams> params_;
    std::vector<Shape> shapes_;
    LossKind loss_ = LossKind::softmax_cross_entropy;
};

/// Forward for a single layer in inference semantics.
Tensor layer_forward(const LayerSpec& spec, const LayerParams& params, const Tensor& weights, const Tensor& x);

struct TrainingGraph {
    Graph graph;
    NodeId input = 0;
    NodeId target = 0;
    NodeId output = 0;
    NodeId loss = 0;
    std::vector<NodeId> layer_outputs;     // per layer
    std::map<std::size_t, NodeId> batch_norm_nodes;
    std::map<std::size_t, NodeId> act_quant_nodes;
};

/// Graph of the network in training form (batch statistics, STE quantizers) for a fixed batch size.
TrainingGraph build_training_graph(const Network& net, std::size_t batch);

/// Inputs and forward-pass parameters (tied weights Q for quantized layers).
TensorMap training_bindings(const Network& net, const Tensor& x, const Tensor& target);

/// Sets every act_quant range to the smallest power of two covering the observed |activation|.
/// With batch statistics the training form of BN is used; otherwise running statistics.
std::vector<double> calibrate_act_range(Network& net, const Tensor& batch, bool batch_statistics = false);

struct StepOptions {
    double learning_rate = 0.1;
    std::size_t kmeans_iterations = 1;
    std::map<std::size_t, std::size_t> layer_iterations;  // per-layer overrides of kmeans_iterations

    std::size_t iterations_for(std::size_t layer) const {
        const auto it = layer_iterations.find(layer);
        return it == layer_iterations.end() ? kmeans_iterations : it->second;
    }
};

struct StepReport {
    double loss = 0.0;
    GradientMap gradients;                     // w.r.t. the forward-pass parameters (Q for quantized layers)
    std::map<std::size_t, KMeansTrace> traces;
};

/// One LUT-Q minibatch step: tied weights, forward/backward, SGD on W, M k-means iterations.
/// Layers without a LUT-Q state get plain SGD, so an unquantized network trains in full precision.
StepReport lutq_train_step(Network& net, const Tensor& x, const Tensor& target, const StepOptions& options);

}  // namespace lutq
