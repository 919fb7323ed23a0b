#include "lutq/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "lutq/errors.hpp"
#include "lutq/mlbn.hpp"

namespace lutq {

std::string_view to_string(OpKind kind) {
    switch (kind) {
        case OpKind::input: return "input";
        case OpKind::parameter: return "parameter";
        case OpKind::matmul: return "matmul";
        case OpKind::linear: return "linear";
        case OpKind::conv2d: return "conv2d";
        case OpKind::bias_add: return "bias_add";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::relu: return "relu";
        case OpKind::batch_norm: return "batch_norm";
        case OpKind::act_quant: return "act_quant";
        case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
        case OpKind::squared_error: return "squared_error";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
    }
    return "unknown";
}

// --- graph construction -------------------------------------------------------------------

NodeId Graph::push(OpKind kind, std::vector<NodeId> inputs, std::string label) {
    const NodeId id = nodes_.size();
    for (NodeId in : inputs)
        if (in >= id) fail(ErrorCategory::shape, "graph input node " + std::to_string(in) + " does not exist yet");
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.label = label.empty() ? std::string(to_string(kind)) + "#" + std::to_string(id) : std::move(label);
    nodes_.push_back(std::move(n));
    return id;
}

NodeId Graph::input(std::string name, Shape shape) {
    if (inputs_.contains(name) || parameters_.contains(name))
        fail(ErrorCategory::shape, "duplicate graph binding '" + name + "'");
    const NodeId id = push(OpKind::input, {}, name);
    nodes_[id].declared_shape = std::move(shape);
    inputs_.emplace(std::move(name), id);
    return id;
}

NodeId Graph::parameter(std::string name, Shape shape) {
    if (inputs_.contains(name) || parameters_.contains(name))
        fail(ErrorCategory::shape, "duplicate graph binding '" + name + "'");
    const NodeId id = push(OpKind::parameter, {}, name);
    nodes_[id].declared_shape = std::move(shape);
    parameters_.emplace(std::move(name), id);
    return id;
}

NodeId Graph::matmul(NodeId a, NodeId b, std::string label) { return push(OpKind::matmul, {a, b}, std::move(label)); }
NodeId Graph::linear(NodeId x, NodeId w, std::string label) { return push(OpKind::linear, {x, w}, std::move(label)); }

NodeId Graph::conv2d(NodeId x, NodeId weight, Conv2dGeometry geometry, std::string label) {
    const NodeId id = push(OpKind::conv2d, {x, weight}, std::move(label));
    nodes_[id].conv = geometry;
    return id;
}

NodeId Graph::bias_add(NodeId x, NodeId b, std::string label) {
    return push(OpKind::bias_add, {x, b}, std::move(label));
}
NodeId Graph::add(NodeId a, NodeId b, std::string label) { return push(OpKind::add, {a, b}, std::move(label)); }
NodeId Graph::mul(NodeId a, NodeId b, std::string label) { return push(OpKind::mul, {a, b}, std::move(label)); }
NodeId Graph::relu(NodeId x, std::string label) { return push(OpKind::relu, {x}, std::move(label)); }

NodeId Graph::batch_norm(NodeId x, NodeId gamma, NodeId beta, double epsilon, BatchNormMode mode,
                         std::string label) {
    const NodeId id = push(OpKind::batch_norm, {x, gamma, beta}, std::move(label));
    nodes_[id].bn_epsilon = epsilon;
    nodes_[id].bn_mode = mode;
    return id;
}

NodeId Graph::act_quant(NodeId x, ActQuantSpec spec, std::string label) {
    spec.validate();
    const NodeId id = push(OpKind::act_quant, {x}, std::move(label));
    nodes_[id].act_quant = spec;
    return id;
}

void Graph::set_act_quant_spec(NodeId id, ActQuantSpec spec) {
    spec.validate();
    if (node(id).kind != OpKind::act_quant) fail(ErrorCategory::shape, "node is not an act_quant node");
    nodes_[id].act_quant = spec;
}

NodeId Graph::softmax_cross_entropy(NodeId logits, NodeId labels, std::string label) {
    return push(OpKind::softmax_cross_entropy, {logits, labels}, std::move(label));
}
NodeId Graph::squared_error(NodeId prediction, NodeId target, std::string label) {
    return push(OpKind::squared_error, {prediction, target}, std::move(label));
}
NodeId Graph::sum(NodeId x, std::string label) { return push(OpKind::sum, {x}, std::move(label)); }
NodeId Graph::mean(NodeId x, std::string label) { return push(OpKind::mean, {x}, std::move(label)); }

const Node& Graph::node(NodeId id) const {
    if (id >= nodes_.size()) fail(ErrorCategory::shape, "node " + std::to_string(id) + " does not exist");
    return nodes_[id];
}

// --- evaluation -----------------------------------------------------------------------------

const Tensor& Evaluation::value(NodeId id) const {
    if (id >= values_.size()) fail(ErrorCategory::shape, "node " + std::to_string(id) + " was not evaluated");
    return values_[id];
}

const Tensor& Evaluation::value(std::string_view label) const {
    for (NodeId id = 0; id < values_.size(); ++id)
        if (graph_->node(id).label == label) return values_[id];
    fail(ErrorCategory::shape, "no node labelled '" + std::string(label) + "'");
}

const BatchNormCache& Evaluation::batch_norm_cache(NodeId id) const {
    auto it = bn_caches_.find(id);
    if (it == bn_caches_.end()) fail(ErrorCategory::shape, "node " + std::to_string(id) + " is not a batch_norm node");
    return it->second;
}

namespace {

std::string describe(const Graph& g, NodeId id) {
    const Node& n = g.node(id);
    return "node " + std::to_string(id) + " (" + std::string(to_string(n.kind)) + " '" + n.label + "')";
}

void require_same_shape(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        fail(ErrorCategory::shape, "operand shapes differ: " + shape_to_string(a.shape()) + " vs " +
                                       shape_to_string(b.shape()));
}

Tensor matmul_forward(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        fail(ErrorCategory::shape, "matmul of " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor y({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * m + j];
            y[i * m + j] = acc;
        }
    return y;
}

std::size_t batch_of(const Tensor& t) { return t.rank() >= 2 ? t.dim(0) : 1; }

std::vector<double> softmax_row(const double* logits, std::size_t c) {
    const double mx = *std::max_element(logits, logits + c);
    std::vector<double> p(c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(logits[j] - mx));
    for (double& v : p) v /= z;
    return p;
}

std::size_t class_index(double label, std::size_t classes) {
    if (!(label >= 0.0) || label != std::floor(label) || label >= static_cast<double>(classes))
        fail(ErrorCategory::shape, "label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    return static_cast<std::size_t>(label);
}

}  // namespace

Evaluation evaluate(const Graph& graph, const TensorMap& bindings) {
    Evaluation ev;
    ev.graph_ = &graph;
    ev.values_.resize(graph.size());
    for (NodeId id = 0; id < graph.size(); ++id) {
        const Node& n = graph.node(id);
        auto in = [&](std::size_t k) -> const Tensor& { return ev.values_[n.inputs[k]]; };
        Tensor out;
        try {
            switch (n.kind) {
                case OpKind::input:
                case OpKind::parameter: {
                    auto it = bindings.find(n.label);
                    if (it == bindings.end()) fail(ErrorCategory::shape, "no tensor bound");
                    if (it->second.shape() != n.declared_shape)
                        fail(ErrorCategory::shape, "bound shape " + shape_to_string(it->second.shape()) +
                                                       " != declared " + shape_to_string(n.declared_shape));
                    out = it->second;
                    break;
                }
                case OpKind::matmul: out = matmul_forward(in(0), in(1)); break;
                case OpKind::linear: out = linear_forward(in(0), in(1)); break;
                case OpKind::conv2d: out = conv2d_forward(in(0), in(1), n.conv); break;
                case OpKind::bias_add: out = lutq::bias_add(in(0), in(1)); break;
                case OpKind::add: {
                    require_same_shape(in(0), in(1));
                    out = in(0);
                    for (std::size_t i = 0; i < out.size(); ++i) out[i] += in(1)[i];
                    break;
                }
                case OpKind::mul: {
                    require_same_shape(in(0), in(1));
                    out = in(0);
                    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= in(1)[i];
                    break;
                }
                case OpKind::relu: out = lutq::relu(in(0)); break;
                case OpKind::batch_norm: {
                    if (n.bn_mode == BatchNormMode::standard) {
                        BatchNormForward f = batch_norm_forward(in(0), in(1).values(), in(2).values(), n.bn_epsilon);
                        out = std::move(f.y);
                        ev.bn_caches_[id] = std::move(f.cache);
                    } else {
                        BNState s = BNState::identity(in(1).size());
                        s.gamma.assign(in(1).values().begin(), in(1).values().end());
                        s.beta.assign(in(2).values().begin(), in(2).values().end());
                        s.epsilon = n.bn_epsilon;
                        MlbnForward f = mlbn_forward_train(in(0), s);
                        out = std::move(f.y);
                        ev.bn_caches_[id] = std::move(f.cache);
                    }
                    break;
                }
                case OpKind::act_quant: out = act_quant_forward(in(0), n.act_quant); break;
                case OpKind::softmax_cross_entropy: {
                    const Tensor& logits = in(0);
                    const Tensor& labels = in(1);
                    if (logits.rank() != 2 || labels.size() != logits.dim(0))
                        fail(ErrorCategory::shape, "cross-entropy needs logits [n,c] and labels [n], got " +
                                                       shape_to_string(logits.shape()) + " and " +
                                                       shape_to_string(labels.shape()));
                    const std::size_t rows = logits.dim(0), c = logits.dim(1);
                    double total = 0.0;
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* row = logits.data() + r * c;
                        const double mx = *std::max_element(row, row + c);
                        double z = 0.0;
                        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
                        total += std::log(z) + mx - row[class_index(labels[r], c)];
                    }
                    out = Tensor::scalar(total / static_cast<double>(rows));
                    break;
                }
                case OpKind::squared_error: {
                    require_same_shape(in(0), in(1));
                    double total = 0.0;
                    for (std::size_t i = 0; i < in(0).size(); ++i) {
                        const double r = in(0)[i] - in(1)[i];
                        total += r * r;
                    }
                    out = Tensor::scalar(0.5 * total / static_cast<double>(batch_of(in(0))));
                    break;
                }
                case OpKind::sum: {
                    double total = 0.0;
                    for (double v : in(0).values()) total += v;
                    out = Tensor::scalar(total);
                    break;
                }
                case OpKind::mean: {
                    double total = 0.0;
                    for (double v : in(0).values()) total += v;
                    out = Tensor::scalar(total / static_cast<double>(in(0).size()));
                    break;
                }
            }
        } catch (const Error& e) {
            throw Error(e.category(), describe(graph, id) + ": " + e.what());
        }
        require_finite(out, describe(graph, id));
        ev.values_[id] = std::move(out);
    }
    return ev;
}

// --- backprop -------------------------------------------------------------------------------

namespace {

void accumulate(std::vector<Tensor>& adj, NodeId id, const Tensor& g) {
    if (adj[id].empty()) {
        adj[id] = g;
        return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) adj[id][i] += g[i];
}

}  // namespace

GradientMap backprop(const Graph& graph, const Evaluation& ev, NodeId loss) {
    if (ev.size() != graph.size()) fail(ErrorCategory::shape, "evaluation does not belong to this graph");
    if (ev.value(loss).size() != 1)
        fail(ErrorCategory::shape, "loss " + describe(graph, loss) + " is not scalar: " +
                                       shape_to_string(ev.value(loss).shape()));

    std::vector<Tensor> adj(graph.size());
    adj[loss] = Tensor(ev.value(loss).shape(), 1.0);

    for (NodeId id = loss + 1; id-- > 0;) {
        if (adj[id].empty()) continue;
        const Node& n = graph.node(id);
        const Tensor& dy = adj[id];
        auto in = [&](std::size_t k) -> const Tensor& { return ev.value(n.inputs[k]); };
        switch (n.kind) {
            case OpKind::input:
            case OpKind::parameter: break;
            case OpKind::matmul: {
                const Tensor &a = in(0), &b = in(1);
                const std::size_t rows = a.dim(0), k = a.dim(1), m = b.dim(1);
                Tensor da(a.shape()), db(b.shape());
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        const double g = dy[i * m + j];
                        for (std::size_t t = 0; t < k; ++t) {
                            da[i * k + t] += g * b[t * m + j];
                            db[t * m + j] += g * a[i * k + t];
                        }
                    }
                accumulate(adj, n.inputs[0], da);
                accumulate(adj, n.inputs[1], db);
                break;
            }
            case OpKind::linear: {
                Tensor dx, dw;
                linear_backward(in(0), in(1), dy, &dx, &dw);
                accumulate(adj, n.inputs[0], dx);
                accumulate(adj, n.inputs[1], dw);
                break;
            }
            case OpKind::conv2d: {
                Tensor dx, dw;
                conv2d_backward(in(0), in(1), dy, n.conv, &dx, &dw);
                accumulate(adj, n.inputs[0], dx);
                accumulate(adj, n.inputs[1], dw);
                break;
            }
            case OpKind::bias_add: {
                const ChannelLayout l = ChannelLayout::of(dy);
                Tensor db(in(1).shape());
                for (std::size_t s = 0; s < l.outer; ++s)
                    for (std::size_t c = 0; c < l.channels; ++c)
                        for (std::size_t i = 0; i < l.inner; ++i) db[c] += dy[(s * l.channels + c) * l.inner + i];
                accumulate(adj, n.inputs[0], dy);
                accumulate(adj, n.inputs[1], db);
                break;
            }
            case OpKind::add:
                accumulate(adj, n.inputs[0], dy);
                accumulate(adj, n.inputs[1], dy);
                break;
            case OpKind::mul: {
                Tensor da = dy, db = dy;
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    da[i] *= in(1)[i];
                    db[i] *= in(0)[i];
                }
                accumulate(adj, n.inputs[0], da);
                accumulate(adj, n.inputs[1], db);
                break;
            }
            case OpKind::relu: {
                Tensor dx = dy;
                for (std::size_t i = 0; i < dx.size(); ++i)
                    if (!(in(0)[i] > 0.0)) dx[i] = 0.0;
                accumulate(adj, n.inputs[0], dx);
                break;
            }
            case OpKind::batch_norm: {
                BatchNormGrads g = n.bn_mode == BatchNormMode::standard
                                       ? batch_norm_backward(ev.batch_norm_cache(id), dy)
                                       : mlbn_backward(ev.batch_norm_cache(id), dy);
                accumulate(adj, n.inputs[0], g.dx);
                accumulate(adj, n.inputs[1], Tensor(in(1).shape(), std::move(g.dgamma)));
                accumulate(adj, n.inputs[2], Tensor(in(2).shape(), std::move(g.dbeta)));
                break;
            }
            case OpKind::act_quant:
                accumulate(adj, n.inputs[0], act_quant_backward(dy, in(0), n.act_quant));
                break;
            case OpKind::softmax_cross_entropy: {
                const Tensor& logits = in(0);
                const std::size_t rows = logits.dim(0), c = logits.dim(1);
                const double scale = dy.item() / static_cast<double>(rows);
                Tensor dl(logits.shape());
                for (std::size_t r = 0; r < rows; ++r) {
                    std::vector<double> p = softmax_row(logits.data() + r * c, c);
                    p[class_index(in(1)[r], c)] -= 1.0;
                    for (std::size_t j = 0; j < c; ++j) dl[r * c + j] = p[j] * scale;
                }
                accumulate(adj, n.inputs[0], dl);
                break;
            }
            case OpKind::squared_error: {
                const double scale = dy.item() / static_cast<double>(batch_of(in(0)));
                Tensor dp(in(0).shape()), dt(in(1).shape());
                for (std::size_t i = 0; i < dp.size(); ++i) {
                    dp[i] = (in(0)[i] - in(1)[i]) * scale;
                    dt[i] = -dp[i];
                }
                accumulate(adj, n.inputs[0], dp);
                accumulate(adj, n.inputs[1], dt);
                break;
            }
            case OpKind::sum:
                accumulate(adj, n.inputs[0], Tensor(in(0).shape(), dy.item()));
                break;
            case OpKind::mean:
                accumulate(adj, n.inputs[0], Tensor(in(0).shape(), dy.item() / static_cast<double>(in(0).size())));
                break;
        }
    }

    GradientMap grads;
    for (const auto& [name, id] : graph.parameters())
        grads.emplace(name, adj[id].empty() ? Tensor(ev.value(id).shape()) : std::move(adj[id]));
    return grads;
}

double finite_difference_check(const Graph& graph, const TensorMap& bindings, std::string_view parameter,
                               NodeId loss, double step) {
    if (!(step > 0.0)) fail(ErrorCategory::numeric, "finite-difference step must be positive");
    auto pit = graph.parameters().find(parameter);
    if (pit == graph.parameters().end())
        fail(ErrorCategory::shape, "no parameter named '" + std::string(parameter) + "'");

    const Evaluation base = evaluate(graph, bindings);
    const GradientMap grads = backprop(graph, base, loss);
    const Tensor& analytic = grads.find(parameter)->second;

    TensorMap probe = bindings;
    Tensor& p = probe.find(parameter)->second;
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double original = p[i];
        p[i] = original + step;
        const double up = evaluate(graph, probe).value(loss).item();
        p[i] = original - step;
        const double down = evaluate(graph, probe).value(loss).item();
        p[i] = original;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-12});
        worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
    }
    return worst;
}

TensorMap sgd_update(const TensorMap& params, const GradientMap& grads, double eta) {
    if (!(eta >= 0.0)) fail(ErrorCategory::numeric, "learning rate must be non-negative");
    TensorMap out;
    for (const auto& [name, w] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) fail(ErrorCategory::shape, "missing gradient for parameter '" + name + "'");
        if (it->second.shape() != w.shape())
            fail(ErrorCategory::shape, "gradient shape " + shape_to_string(it->second.shape()) + " != parameter '" +
                                           name + "' shape " + shape_to_string(w.shape()));
        Tensor updated = w;
        for (std::size_t i = 0; i < updated.size(); ++i) updated[i] -= eta * it->second[i];
        out.emplace(name, std::move(updated));
    }
    return out;
}

}  // namespace lutq
