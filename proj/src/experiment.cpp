#include "lutq/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include "json.hpp"

#include "lutq/errors.hpp"
#include "lutq/report.hpp"

namespace lutq {

// --- MetricLog ------------------------------------------------------------------------------

MetricLog::MetricLog(std::vector<std::string> columns) : columns_(std::move(columns)) {}

void MetricLog::append(std::vector<double> row) {
    if (row.size() != columns_.size())
        fail(ErrorCategory::internal, fmt::format("metric row has {} values for {} columns", row.size(), columns_.size()));
    rows_.push_back(std::move(row));
}

double MetricLog::value(std::size_t row, std::string_view column) const {
    const auto it = std::find(columns_.begin(), columns_.end(), column);
    if (it == columns_.end()) fail(ErrorCategory::usage, "no metric column '" + std::string(column) + "'");
    return rows_.at(row).at(static_cast<std::size_t>(it - columns_.begin()));
}

std::string MetricLog::to_csv() const {
    std::string out;
    for (std::size_t j = 0; j < columns_.size(); ++j) out += (j ? "," : "") + columns_[j];
    out += '\n';
    for (const auto& row : rows_) {
        for (std::size_t j = 0; j < row.size(); ++j) out += fmt::format("{}{:.17g}", j ? "," : "", row[j]);
        out += '\n';
    }
    return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCategory::data, "cannot write " + path.string());
    out << text;
    if (!out) fail(ErrorCategory::data, "write failed for " + path.string());
}

}  // namespace

void MetricLog::write_csv(const std::filesystem::path& path) const { write_text(path, to_csv()); }

// --- training -------------------------------------------------------------------------------

namespace {

Tensor targets_for(const Network& net, const Dataset& d) {
    if (net.loss() == LossKind::softmax_cross_entropy) return d.label_tensor();
    const std::size_t classes = shape_size(net.output_shape());
    Tensor t({d.size(), classes});
    for (std::size_t i = 0; i < d.size(); ++i) t[i * classes + d.labels[i]] = 1.0;
    return t;
}

void check_data_fits(const Network& net, const Dataset& d) {
    if (d.sample_shape() != net.input_shape())
        fail(ErrorCategory::shape, "data samples " + shape_to_string(d.sample_shape()) + " do not match network input " +
                                       shape_to_string(net.input_shape()));
    const std::size_t outputs = shape_size(net.output_shape());
    if (d.classes > outputs)
        fail(ErrorCategory::shape, fmt::format("{} classes but the network has {} outputs", d.classes, outputs));
}

double error_pct(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels) {
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) wrong += predicted[i] != labels[i];
    return 100.0 * static_cast<double>(wrong) / static_cast<double>(labels.size());
}

bool has_act_quant(const Network& net) {
    return std::any_of(net.layers().begin(), net.layers().end(),
                       [](const LayerSpec& s) { return s.kind == LayerKind::act_quant; });
}

std::vector<std::size_t> weighted_layers(const Network& net) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < net.size(); ++i)
        if (net.spec(i).has_weights()) out.push_back(i);
    return out;
}

std::vector<std::string> metric_columns(const Network& net) {
    std::vector<std::string> c{"epoch", "learning_rate", "train_loss", "val_error_pct"};
    for (std::size_t i : weighted_layers(net)) {
        c.push_back(fmt::format("qerr_L{}", i));
        c.push_back(fmt::format("sparsity_L{}", i));
    }
    c.push_back("footprint_bits");
    return c;
}

std::vector<double> layer_metrics(const Network& net) {
    std::vector<double> v;
    double bits = 0;
    for (std::size_t i : weighted_layers(net)) {
        const LayerParams& p = net.params(i);
        if (p.quant) {
            v.push_back(quantization_error(*p.quant));
            v.push_back(sparsity(*p.quant));
            bits += static_cast<double>(lutq_formula_bits(p.quant->dictionary_size(), p.quant->weights.size()));
        } else {
            const Tensor& w = p.weight;
            v.push_back(0.0);
            v.push_back(static_cast<double>(std::count(w.values().begin(), w.values().end(), 0.0)) /
                        static_cast<double>(w.size()));
            bits += static_cast<double>(w.size() * kFloatBits);
        }
    }
    v.push_back(bits);
    return v;
}

void quantize_per_plan(Network& net, const std::map<std::size_t, LayerQuantPlan>& plan) {
    for (const auto& [i, p] : plan) net.quantize_layer(i, p.k, p.constraint);
}

StepOptions step_options(double rate, const std::map<std::size_t, LayerQuantPlan>& plan) {
    StepOptions o;
    o.learning_rate = rate;
    for (const auto& [i, p] : plan) o.layer_iterations[i] = p.iterations;
    return o;
}

struct Diverged {
    Network last_good;
    MetricLog log;
    std::string message;
};

TrainResult train_impl(const ExperimentConfig& config, const DatasetSplit& data, const TrainHooks& hooks) {
    config.validate();
    Network net = build_network(config, data.train.sample_shape());
    check_data_fits(net, data.train);
    check_data_fits(net, data.validation);
    const auto plan = config.quant.enabled ? config.quant.resolve(net.layers()) : std::map<std::size_t, LayerQuantPlan>{};
    const bool calibrate = has_act_quant(net);

    MetricLog log(metric_columns(net));
    Network last_good = net;
    std::mt19937_64 shuffle_rng(config.seed ^ 0x5deece66dULL);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t batch = std::min(config.optimizer.batch_size, data.train.size());

    for (std::size_t epoch = 1; epoch <= config.optimizer.epochs; ++epoch) {
        if (config.quant.enabled && epoch - 1 == config.quant.start_epoch) quantize_per_plan(net, plan);
        // Full training set in training form, so the ranges do not depend on the shuffle.
        if (calibrate) calibrate_act_range(net, data.train.features, true);
        const double rate = config.optimizer.rate_at(epoch);
        const StepOptions options = step_options(rate, plan);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t end = std::min(order.size(), start + batch);
            if (end - start < 2) break;  // BN needs two samples
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const Dataset mb = data.train.subset(idx);
            std::string why;
            StepReport report;
            try {
                report = lutq_train_step(net, mb.features, targets_for(net, mb), options);
            } catch (const Error& e) {
                if (e.category() != ErrorCategory::numeric) throw;
                why = e.what();
            }
            if (why.empty() && !std::isfinite(report.loss)) why = "loss is not finite";
            if (!why.empty())
                throw Diverged{std::move(last_good), std::move(log),
                               fmt::format("training diverged at epoch {} step {}: {}", epoch, steps + 1, why)};
            if (hooks.on_step) hooks.on_step(epoch, steps, report);
            loss_sum += report.loss;
            ++steps;
        }

        double val_error = 0.0;
        try {
            val_error = error_pct(net.predict(data.validation.features), data.validation.labels);
        } catch (const Error& e) {
            if (e.category() != ErrorCategory::numeric) throw;
            throw Diverged{std::move(last_good), std::move(log),
                           fmt::format("training diverged in epoch {}: {}", epoch, e.what())};
        }
        std::vector<double> row{static_cast<double>(epoch), rate, loss_sum / static_cast<double>(steps), val_error};
        const auto lm = layer_metrics(net);
        row.insert(row.end(), lm.begin(), lm.end());
        log.append(std::move(row));
        last_good = net;
    }

    TrainResult r;
    r.model = export_model(net);
    r.network = std::move(net);
    r.log = std::move(log);
    r.validation_error_pct = cmd_evaluate(r.model, data.validation, ExecutionMode::dense).error_pct;
    r.footprint = footprint_report(r.model);
    return r;
}

nlohmann::json summary_json(const ExperimentConfig& config, const TrainResult& r, const SerializationStats& stats) {
    nlohmann::json j;
    j["name"] = config.name;
    j["seed"] = config.seed;
    j["epochs"] = config.optimizer.epochs;
    j["quantized"] = config.quant.enabled;
    j["validation_error_pct"] = r.validation_error_pct;
    j["footprint"] = to_json(r.footprint);
    j["serialization"] = to_json(stats);
    if (r.log.size() > 0) {
        nlohmann::json last;
        for (std::size_t c = 0; c < r.log.columns().size(); ++c) last[r.log.columns()[c]] = r.log.rows().back()[c];
        j["last_epoch"] = last;
    }
    return j;
}

}  // namespace

Network build_network(const ExperimentConfig& config, const Shape& input_shape) {
    return Network(input_shape, build_layers(config.layers, input_shape, config.activation_bits, config.bn_mode),
                   config.seed, config.loss);
}

TrainResult train(const ExperimentConfig& config, const DatasetSplit& data, const TrainHooks& hooks) {
    try {
        return train_impl(config, data, hooks);
    } catch (Diverged& d) {
        fail(ErrorCategory::numeric, d.message);
    }
}

TrainResult cmd_train(const ExperimentConfig& config, const TrainHooks& hooks) {
    const DatasetSplit data = load_dataset(config.data_source());
    const auto& dir = config.output_dir;
    if (!dir.empty()) std::filesystem::create_directories(dir);
    try {
        TrainResult r = train_impl(config, data, hooks);
        if (!dir.empty()) {
            SerializationStats stats;
            save_model(r.model, dir / "model.lutq", &stats);
            r.log.write_csv(dir / "metrics.csv");
            write_text(dir / "summary.json", summary_json(config, r, stats).dump(2) + "\n");
        }
        return r;
    } catch (Diverged& d) {
        std::string msg = d.message;
        if (!dir.empty()) {
            save_model(export_model(d.last_good), dir / "model.lutq");
            d.log.write_csv(dir / "metrics.csv");
            msg += fmt::format("; last good checkpoint (epoch {}) written to {}", d.log.size(),
                               (dir / "model.lutq").string());
        }
        fail(ErrorCategory::numeric, msg);
    }
}

// --- quantize / evaluate --------------------------------------------------------------------

QuantizeResult cmd_quantize(const PackedModel& model, const QuantizationPlan& plan) {
    std::vector<LayerSpec> specs;
    for (const auto& l : model.layers) specs.push_back(l.spec);
    const auto resolved = plan.resolve(specs);
    if (resolved.empty()) fail(ErrorCategory::config, "quantization plan covers no layer of the model");
    Network net = import_model(model);
    QuantizeResult r;
    for (const auto& [i, p] : resolved) {
        net.quantize_layer(i, p.k, p.constraint);
        const QuantizedLayerState& q = *net.params(i).quant;
        r.errors.push_back({i, q.dictionary_size(), q.constraint.describe(), quantization_error(q), sparsity(q)});
    }
    r.model = export_model(net);
    r.footprint = footprint_report(r.model);
    return r;
}

EvaluateResult cmd_evaluate(const PackedModel& model, const Dataset& data, ExecutionMode mode) {
    if (data.size() == 0) fail(ErrorCategory::data, "empty evaluation set");
    if (data.sample_shape() != model.input_shape)
        fail(ErrorCategory::shape, "data samples " + shape_to_string(data.sample_shape()) + " do not match model input " +
                                       shape_to_string(model.input_shape));
    InferenceResult inf = run_inference(model, data.features, mode);
    const std::size_t n = data.size(), c = inf.output.size() / n;
    if (data.classes > c) fail(ErrorCategory::shape, fmt::format("{} classes but the model has {} outputs", data.classes, c));
    EvaluateResult r;
    r.samples = n;
    r.predictions = argmax_rows(inf.output);
    r.error_pct = error_pct(r.predictions, data.labels);
    for (std::size_t i = 0; i < n && c > 1; ++i) {
        std::vector<double> row(inf.output.data() + i * c, inf.output.data() + (i + 1) * c);
        std::partial_sort(row.begin(), row.begin() + 2, row.end(), std::greater<>());
        if (row[0] - row[1] <= 1e-9 * std::max(1.0, std::fabs(row[0]))) ++r.near_ties;
    }
    r.ops = std::move(inf.ops);
    return r;
}

// --- sweep ----------------------------------------------------------------------------------

std::string SweepResult::to_csv() const {
    std::string out = "ratio,bits,val_error_pct,baseline_error_pct,increase_pct,sparsity\n";
    for (const auto& r : rows)
        out += fmt::format("{:.17g},{},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.ratio, r.bits, r.error_pct,
                           baseline_error_pct, r.increase_pct, r.sparsity);
    return out;
}

namespace {

double overall_sparsity(const Network& net) {
    double zeros = 0, total = 0;
    for (std::size_t i = 0; i < net.size(); ++i)
        if (net.params(i).quant) {
            const auto& q = *net.params(i).quant;
            zeros += sparsity(q) * static_cast<double>(q.weights.size());
            total += static_cast<double>(q.weights.size());
        }
    return total > 0 ? zeros / total : 0.0;
}

ExperimentConfig grid_config(const ExperimentConfig& base, double ratio, unsigned bits) {
    ExperimentConfig c = base;
    c.quant.enabled = true;
    c.quant.k = bits == 0 ? 0 : std::size_t{1} << bits;
    c.quant.k_overrides.clear();
    c.quant.constraint_overrides.clear();
    const DictionaryConstraint inner = base.quant.constraint.effective();
    c.quant.constraint = ratio > 0 ? DictionaryConstraint::pruned(ratio, inner) : inner;
    return c;
}

SweepResult sweep_impl(const ExperimentConfig& config, const DatasetSplit& data,
                       const std::function<void(const std::string&, const TrainResult&)>& sink) {
    if (config.sweep.ratios.empty() || config.sweep.bits.empty())
        fail(ErrorCategory::config, "sweep grid is empty (set sweep.ratios and sweep.bits)");
    ExperimentConfig base = config;
    base.quant.enabled = false;
    const TrainResult baseline = train(base, data);
    if (sink) sink("baseline", baseline);
    SweepResult result;
    result.baseline_error_pct = baseline.validation_error_pct;
    for (double ratio : config.sweep.ratios)
        for (unsigned bits : config.sweep.bits) {
            const TrainResult r = train(grid_config(config, ratio, bits), data);
            if (sink) sink(fmt::format("ratio{:g}_bits{}", ratio, bits), r);
            result.rows.push_back({ratio, bits, r.validation_error_pct,
                                   r.validation_error_pct - baseline.validation_error_pct, overall_sparsity(r.network)});
        }
    return result;
}

}  // namespace

SweepResult run_sweep(const ExperimentConfig& config, const DatasetSplit& data) { return sweep_impl(config, data, {}); }

SweepResult cmd_sweep(const ExperimentConfig& config) {
    const DatasetSplit data = load_dataset(config.data_source());
    const auto& dir = config.output_dir;
    std::function<void(const std::string&, const TrainResult&)> sink;
    if (!dir.empty()) {
        std::filesystem::create_directories(dir);
        sink = [&](const std::string& name, const TrainResult& r) {
            std::filesystem::create_directories(dir / name);
            r.log.write_csv(dir / name / "metrics.csv");
            save_model(r.model, dir / name / "model.lutq");
        };
    }
    SweepResult r = sweep_impl(config, data, sink);
    if (!dir.empty()) write_text(dir / "sweep.csv", r.to_csv());
    return r;
}

}  // namespace lutq
