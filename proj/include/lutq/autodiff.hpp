#pragma once

// Static computation graphs with reverse-mode differentiation.
//
// A Graph is built once and evaluated against a map of bound tensors (inputs and parameters share
// one namespace). Evaluation is a pure function of the bindings; backprop walks the nodes in
// reverse index order, so gradient accumulation order is fixed.

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lutq/layers.hpp"
#include "lutq/tensor.hpp"

namespace lutq {

using NodeId = std::size_t;
using TensorMap = std::map<std::string, Tensor, std::less<>>;
using GradientMap = std::map<std::string, Tensor, std::less<>>;

enum class OpKind {
    input,
    parameter,
    matmul,          // a [n,k] x b [k,m]
    linear,          // x [n,i] x w[o,i]^T
    conv2d,
    bias_add,
    add,
    mul,
    relu,
    batch_norm,      // batch statistics; standard or multiplier-less
    act_quant,       // straight-through estimator
    softmax_cross_entropy,
    squared_error,   // 0.5 * sum((p - t)^2) / batch
    sum,
    mean,
};

std::string_view to_string(OpKind kind);

struct Node {
    OpKind kind = OpKind::input;
    std::vector<NodeId> inputs;
    std::string label;
    Shape declared_shape;  // input / parameter only
    Conv2dGeometry conv;
    double bn_epsilon = 1e-5;
    BatchNormMode bn_mode = BatchNormMode::standard;
    ActQuantSpec act_quant;
};

class Graph {
public:
    NodeId input(std::string name, Shape shape);
    NodeId parameter(std::string name, Shape shape);

    NodeId matmul(NodeId a, NodeId b, std::string label = {});
    NodeId linear(NodeId x, NodeId weight, std::string label = {});
    NodeId conv2d(NodeId x, NodeId weight, Conv2dGeometry geometry, std::string label = {});
    NodeId bias_add(NodeId x, NodeId bias, std::string label = {});
    NodeId add(NodeId a, NodeId b, std::string label = {});
    NodeId mul(NodeId a, NodeId b, std::string label = {});
    NodeId relu(NodeId x, std::string label = {});
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, double epsilon, BatchNormMode mode,
                      std::string label = {});
    NodeId act_quant(NodeId x, ActQuantSpec spec, std::string label = {});
    /// Mean cross-entropy of softmax(logits [n,c]) against class indices stored as reals in labels [n].
    NodeId softmax_cross_entropy(NodeId logits, NodeId labels, std::string label = {});
    NodeId squared_error(NodeId prediction, NodeId target, std::string label = {});
    NodeId sum(NodeId x, std::string label = {});
    NodeId mean(NodeId x, std::string label = {});

    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    const Node& node(NodeId id) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Parameter name -> leaf node.
    const std::map<std::string, NodeId, std::less<>>& parameters() const noexcept { return parameters_; }
    const std::map<std::string, NodeId, std::less<>>& inputs() const noexcept { return inputs_; }

    /// Switches an existing act_quant node to a new range (ranges are recalibrated between epochs).
    void set_act_quant_spec(NodeId id, ActQuantSpec spec);

private:
    NodeId push(OpKind kind, std::vector<NodeId> inputs, std::string label);

    std::vector<Node> nodes_;
    std::map<std::string, NodeId, std::less<>> parameters_;
    std::map<std::string, NodeId, std::less<>> inputs_;
};

/// Node values from one forward pass.
class Evaluation {
public:
    const Tensor& value(NodeId id) const;
    /// Value of the first node whose label (or bound name) is `label`.
    const Tensor& value(std::string_view label) const;
    const BatchNormCache& batch_norm_cache(NodeId id) const;
    std::size_t size() const noexcept { return values_.size(); }

private:
    friend Evaluation evaluate(const Graph& graph, const TensorMap& bindings);

    const Graph* graph_ = nullptr;
    std::vector<Tensor> values_;
    std::map<NodeId, BatchNormCache> bn_caches_;
};

/// Forward pass. Every input and parameter must be bound with its declared shape.
Evaluation evaluate(const Graph& graph, const TensorMap& bindings);

/// Reverse-mode gradients of the scalar `loss` node for every registered parameter.
GradientMap backprop(const Graph& graph, const Evaluation& evaluation, NodeId loss);

/// Max over entries of |analytic - central difference| / max(|analytic|, |numeric|, 1e-12).
double finite_difference_check(const Graph& graph, const TensorMap& bindings, std::string_view parameter,
                               NodeId loss, double step);

/// W - eta * G for every parameter; throws if a gradient is missing or mis-shaped.
TensorMap sgd_update(const TensorMap& params, const GradientMap& grads, double eta);

}  // namespace lutq
