#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lutq/config.hpp"
#include "lutq/dataset.hpp"
#include "lutq/inference.hpp"
#include "lutq/network.hpp"
#include "lutq/packed_model.hpp"

namespace lutq {

/// Per-epoch table with a fixed column set.
class MetricLog {
public:
    MetricLog() = default;
    explicit MetricLog(std::vector<std::string> columns);

    const std::vector<std::string>& columns() const noexcept { return columns_; }
    const std::vector<std::vector<double>>& rows() const noexcept { return rows_; }
    std::size_t size() const noexcept { return rows_.size(); }

    void append(std::vector<double> row);
    double value(std::size_t row, std::string_view column) const;

    /// Values printed with 17 significant digits so the file round-trips exactly.
    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;

    friend bool operator==(const MetricLog&, const MetricLog&) = default;

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<double>> rows_;
};

struct TrainHooks {
    /// Called after every minibatch step with the 1-based epoch and the step index within it.
    std::function<void(std::size_t epoch, std::size_t step, const StepReport&)> on_step;
};

struct TrainResult {
    Network network;
    PackedModel model;
    MetricLog log;
    double validation_error_pct = 0.0;  // of the exported model, dense execution
    FootprintReport footprint;
};

/// Network for the config's layer list on data with the given per-sample shape.
Network build_network(const ExperimentConfig& config, const Shape& input_shape);

/// Full-precision SGD, or LUT-Q steps once the plan's start epoch is reached.
TrainResult train(const ExperimentConfig& config, const DatasetSplit& data, const TrainHooks& hooks = {});

/// Loads the data, trains, and writes metrics.csv, model.lutq and summary.json when output_dir is set.
/// On a non-finite loss the last good epoch is written and a numeric Error is thrown.
TrainResult cmd_train(const ExperimentConfig& config, const TrainHooks& hooks = {});

struct LayerQuantError {
    std::size_t layer = 0;
    std::size_t k = 0;
    std::string constraint;
    double error = 0.0;  // sum (W - Q)^2
    double sparsity = 0.0;
};

struct QuantizeResult {
    PackedModel model;
    FootprintReport footprint;
    std::vector<LayerQuantError> errors;
};

/// Post-hoc quantization of a trained model without further training.
QuantizeResult cmd_quantize(const PackedModel& model, const QuantizationPlan& plan);

struct EvaluateResult {
    double error_pct = 0.0;
    std::size_t samples = 0;
    std::size_t near_ties = 0;  // rows whose two best scores are within 1e-9
    std::vector<std::size_t> predictions;
    OpCountReport ops;
};

EvaluateResult cmd_evaluate(const PackedModel& model, const Dataset& data, ExecutionMode mode);

struct SweepRow {
    double ratio = 0.0;
    unsigned bits = 0;  // 0: K equals the number of weights
    double error_pct = 0.0;
    double increase_pct = 0.0;
    double sparsity = 0.0;
};

struct SweepResult {
    double baseline_error_pct = 0.0;
    std::vector<SweepRow> rows;

    std::string to_csv() const;
};

/// Full-precision baseline plus one LUT-Q run per (ratio, bits); ratio 0 means no pruning.
SweepResult run_sweep(const ExperimentConfig& config, const DatasetSplit& data);
/// As run_sweep, writing sweep.csv and per-point metrics under output_dir when set.
SweepResult cmd_sweep(const ExperimentConfig& config);

}  // namespace lutq
