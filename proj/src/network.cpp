#include "lutq/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lutq/errors.hpp"

namespace lutq {

Network::Network(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed, LossKind loss)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), loss_(loss) {
    if (input_shape_.empty() || shape_size(input_shape_) == 0)
        fail(ErrorCategory::shape, "network input shape must be non-empty");
    if (layers_.empty()) fail(ErrorCategory::shape, "network needs at least one layer");

    std::mt19937_64 rng(seed);
    shapes_.push_back(input_shape_);
    params_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& spec = layers_[i];
        LayerParams& p = params_[i];
        try {
            shapes_.push_back(layer_output_shape(spec, shapes_.back()));
        } catch (const Error& e) {
            throw Error(e.category(), "layer " + std::to_string(i) + " (" + to_string(spec.kind) + "): " + e.what());
        }
        if (spec.has_weights()) {
            const Shape ws = spec.weight_shape();
            const double fan_in = static_cast<double>(shape_size(ws) / ws[0]);
            std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
            p.weight = Tensor(ws);
            for (double& v : p.weight.values()) v = normal(rng);
            p.bias = Tensor({spec.out});
        } else if (spec.kind == LayerKind::batchnorm) {
            p.bn = BNState::identity(spec.in);
        } else if (spec.kind == LayerKind::act_quant) {
            p.act = ActQuantSpec{spec.bits, 1.0};
        }
    }
}

const Tensor& Network::shadow_weights(std::size_t i) const {
    const LayerParams& p = params(i);
    if (!spec(i).has_weights()) fail(ErrorCategory::shape, "layer " + std::to_string(i) + " has no weights");
    return p.quant ? p.quant->weights : p.weight;
}

Tensor& Network::shadow_weights(std::size_t i) {
    LayerParams& p = params(i);
    if (!spec(i).has_weights()) fail(ErrorCategory::shape, "layer " + std::to_string(i) + " has no weights");
    return p.quant ? p.quant->weights : p.weight;
}

Tensor Network::forward_weights(std::size_t i) const {
    const LayerParams& p = params(i);
    return p.quant ? tied_weights(*p.quant) : shadow_weights(i);
}

void Network::quantize_layer(std::size_t i, std::size_t k, const DictionaryConstraint& constraint) {
    LayerParams& p = params(i);
    if (!spec(i).has_weights())
        fail(ErrorCategory::config, "layer " + std::to_string(i) + " (" + to_string(spec(i).kind) + ") has no weights to quantize");
    p.quant = init_quantized_layer(shadow_weights(i), k, constraint);
    p.weight = Tensor();
}

void Network::round_dictionaries_to_float32() {
    for (auto& p : params_)
        if (p.quant)
            for (double& v : p.quant->dictionary) v = static_cast<double>(static_cast<float>(v));
}

Tensor layer_forward(const LayerSpec& spec, const LayerParams& p, const Tensor& weights, const Tensor& x) {
    switch (spec.kind) {
        case LayerKind::affine: return bias_add(linear_forward(x, weights), p.bias);
        case LayerKind::conv2d:
            return bias_add(conv2d_forward(x, weights, Conv2dGeometry{spec.stride, spec.padding}), p.bias);
        case LayerKind::batchnorm:
            return spec.bn_mode == BatchNormMode::multiplier_less ? mlbn_infer(x, fold_mlbn(p.bn))
                                                                  : folded_bn_infer(x, fold_bn(p.bn));
        case LayerKind::relu: return relu(x);
        case LayerKind::act_quant: return act_quant_forward(x, p.act);
    }
    fail(ErrorCategory::shape, "unknown layer kind");
}

namespace {

void require_batch(const Network& net, const Tensor& batch) {
    Shape expected{batch.rank() > 0 ? batch.dim(0) : 0};
    expected.insert(expected.end(), net.input_shape().begin(), net.input_shape().end());
    if (batch.shape() != expected)
        fail(ErrorCategory::shape, "batch shape " + shape_to_string(batch.shape()) + " does not match network input " +
                                       shape_to_string(net.input_shape()));
}

}  // namespace

Tensor Network::forward(const Tensor& batch) const {
    require_batch(*this, batch);
    Tensor x = batch;
    for (std::size_t i = 0; i < size(); ++i) {
        const Tensor w = spec(i).has_weights() ? forward_weights(i) : Tensor();
        x = layer_forward(spec(i), params(i), w, x);
        require_finite(x, "layer " + std::to_string(i) + " (" + to_string(spec(i).kind) + ")");
    }
    return x;
}

std::vector<std::size_t> Network::predict(const Tensor& batch) const {
    const Tensor out = forward(batch);
    const std::size_t n = out.dim(0), c = out.size() / n;
    std::vector<std::size_t> labels(n);
    for (std::size_t s = 0; s < n; ++s) {
        const double* row = out.data() + s * c;
        labels[s] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    }
    return labels;
}

TrainingGraph build_training_graph(const Network& net, std::size_t batch) {
    TrainingGraph tg;
    Graph& g = tg.graph;
    Shape in_shape{batch};
    in_shape.insert(in_shape.end(), net.input_shape().begin(), net.input_shape().end());
    tg.input = g.input("input", in_shape);
    NodeId x = tg.input;
    for (std::size_t i = 0; i < net.size(); ++i) {
        const LayerSpec& spec = net.spec(i);
        const LayerParams& p = net.params(i);
        const std::string tag = "L" + std::to_string(i);
        switch (spec.kind) {
            case LayerKind::affine:
            case LayerKind::conv2d: {
                const NodeId w = g.parameter(Network::weight_name(i), spec.weight_shape());
                const NodeId b = g.parameter(Network::bias_name(i), {spec.out});
                x = spec.kind == LayerKind::affine
                        ? g.linear(x, w, tag + ".linear")
                        : g.conv2d(x, w, Conv2dGeometry{spec.stride, spec.padding}, tag + ".conv2d");
                x = g.bias_add(x, b, tag);
                break;
            }
            case LayerKind::batchnorm: {
                const NodeId gamma = g.parameter(Network::gamma_name(i), {spec.in});
                const NodeId beta = g.parameter(Network::beta_name(i), {spec.in});
                x = g.batch_norm(x, gamma, beta, p.bn.epsilon, spec.bn_mode, tag);
                tg.batch_norm_nodes[i] = x;
                break;
            }
            case LayerKind::relu: x = g.relu(x, tag); break;
            case LayerKind::act_quant:
                x = g.act_quant(x, p.act, tag);
                tg.act_quant_nodes[i] = x;
                break;
        }
        tg.layer_outputs.push_back(x);
    }
    tg.output = x;
    if (net.loss() == LossKind::softmax_cross_entropy) {
        tg.target = g.input("target", {batch});
        tg.loss = g.softmax_cross_entropy(x, tg.target, "loss");
    } else {
        Shape t_shape{batch};
        t_shape.insert(t_shape.end(), net.output_shape().begin(), net.output_shape().end());
        tg.target = g.input("target", t_shape);
        tg.loss = g.squared_error(x, tg.target, "loss");
    }
    return tg;
}

TensorMap training_bindings(const Network& net, const Tensor& x, const Tensor& target) {
    TensorMap b;
    b.emplace("input", x);
    b.emplace("target", target);
    for (std::size_t i = 0; i < net.size(); ++i) {
        const LayerSpec& spec = net.spec(i);
        const LayerParams& p = net.params(i);
        if (spec.has_weights()) {
            b.emplace(Network::weight_name(i), net.forward_weights(i));
            b.emplace(Network::bias_name(i), p.bias);
        } else if (spec.kind == LayerKind::batchnorm) {
            b.emplace(Network::gamma_name(i), Tensor({spec.in}, p.bn.gamma));
            b.emplace(Network::beta_name(i), Tensor({spec.in}, p.bn.beta));
        }
    }
    return b;
}

namespace {

double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double v : t.values()) m = std::max(m, std::fabs(v));
    return m;
}

}  // namespace

std::vector<double> calibrate_act_range(Network& net, const Tensor& batch, bool batch_statistics) {
    require_batch(net, batch);
    std::vector<double> ranges;
    if (!batch_statistics) {
        Tensor x = batch;
        for (std::size_t i = 0; i < net.size(); ++i) {
            if (net.spec(i).kind == LayerKind::act_quant) {
                net.params(i).act.range = act_range_for(max_abs(x));
                ranges.push_back(net.params(i).act.range);
            }
            const Tensor w = net.spec(i).has_weights() ? net.forward_weights(i) : Tensor();
            x = layer_forward(net.spec(i), net.params(i), w, x);
        }
        return ranges;
    }
    // Labels are irrelevant to the activations; bind a valid dummy target.
    const std::size_t n = batch.dim(0);
    Tensor target;
    if (net.loss() == LossKind::softmax_cross_entropy) {
        target = Tensor({n}, 0.0);
    } else {
        Shape ts{n};
        ts.insert(ts.end(), net.output_shape().begin(), net.output_shape().end());
        target = Tensor(ts);
    }
    for (std::size_t i = 0; i < net.size(); ++i) {
        if (net.spec(i).kind != LayerKind::act_quant) continue;
        TrainingGraph tg = build_training_graph(net, n);
        const Evaluation ev = evaluate(tg.graph, training_bindings(net, batch, target));
        const NodeId node = tg.act_quant_nodes.at(i);
        net.params(i).act.range = act_range_for(max_abs(ev.value(tg.graph.node(node).inputs[0])));
        ranges.push_back(net.params(i).act.range);
    }
    return ranges;
}

StepReport lutq_train_step(Network& net, const Tensor& x, const Tensor& target, const StepOptions& options) {
    if (!(options.learning_rate >= 0.0)) fail(ErrorCategory::config, "learning rate must be non-negative");
    require_batch(net, x);
    const TrainingGraph tg = build_training_graph(net, x.dim(0));

    // Step 1 happens in training_bindings: quantized layers bind Q = d[A].
    const Evaluation ev = evaluate(tg.graph, training_bindings(net, x, target));
    StepReport report;
    report.loss = ev.value(tg.loss).item();
    // Step 2: G = dC/dQ.
    report.gradients = backprop(tg.graph, ev, tg.loss);
    const double eta = options.learning_rate;
    auto step = [eta](std::span<double> w, const Tensor& g) {
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= eta * g[j];
    };

    // Step 3: SGD on the full-precision weights (and on biases / BN parameters).
    for (std::size_t i = 0; i < net.size(); ++i) {
        const LayerSpec& spec = net.spec(i);
        LayerParams& p = net.params(i);
        if (spec.has_weights()) {
            step(net.shadow_weights(i).values(), report.gradients.at(Network::weight_name(i)));
            step(p.bias.values(), report.gradients.at(Network::bias_name(i)));
        } else if (spec.kind == LayerKind::batchnorm) {
            step(p.bn.gamma, report.gradients.at(Network::gamma_name(i)));
            step(p.bn.beta, report.gradients.at(Network::beta_name(i)));
            update_running_stats(p.bn, ev.batch_norm_cache(tg.batch_norm_nodes.at(i)));
        }
    }

    // Step 4: M k-means iterations per quantized layer.
    for (std::size_t i = 0; i < net.size(); ++i) {
        LayerParams& p = net.params(i);
        if (!p.quant) continue;
        KMeansTrace& trace = report.traces[i];
        p.quant = kmeans_update(std::move(*p.quant), options.iterations_for(i), &trace);
    }
    return report;
}

}  // namespace lutq
