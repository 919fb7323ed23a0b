// Command-line front end: train, quantize, evaluate, sweep, inspect, footprint.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "lutq/config.hpp"
#include "lutq/errors.hpp"
#include "lutq/experiment.hpp"
#include "lutq/report.hpp"

namespace fs = std::filesystem;
using namespace lutq;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string output;
    std::string model;
    std::string mode = "dense";
    std::string split = "validation";
    bool json = false;
    bool activations = false;
    int act_bits = 8;
};

// Flag, then config, then LUTQ_OUTPUT_DIR.
fs::path output_dir(const Options& o, const fs::path& from_config) {
    if (!o.output.empty()) return o.output;
    if (!from_config.empty()) return from_config;
    if (const char* env = std::getenv("LUTQ_OUTPUT_DIR"); env && *env) return env;
    return {};
}

ExperimentConfig load(const Options& o) {
    if (o.config.empty()) fail(ErrorCategory::usage, "--config is required");
    ExperimentConfig c = load_config(o.config);
    if (o.seed) c.seed = *o.seed;
    c.output_dir = output_dir(o, c.output_dir);
    return c;
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

int run_train(const Options& o) {
    const ExperimentConfig c = load(o);
    const TrainResult r = cmd_train(c);
    if (o.json) {
        print({{"validation_error_pct", r.validation_error_pct}, {"footprint", to_json(r.footprint)}});
    } else {
        std::cout << r.log.to_csv();
        fmt::print("validation error: {:.2f}%\n{}", r.validation_error_pct, format_text(r.footprint));
        if (!c.output_dir.empty()) fmt::print("outputs written to {}\n", c.output_dir.string());
    }
    return 0;
}

int run_quantize(const Options& o) {
    if (o.model.empty()) fail(ErrorCategory::usage, "--model is required");
    const ExperimentConfig c = load(o);
    const QuantizeResult r = cmd_quantize(load_model(o.model), c.quant);
    if (!c.output_dir.empty()) {
        fs::create_directories(c.output_dir);
        save_model(r.model, c.output_dir / "model.lutq");
    }
    if (o.json) {
        nlohmann::json errors = nlohmann::json::array();
        for (const auto& e : r.errors)
            errors.push_back({{"layer", e.layer}, {"k", e.k}, {"constraint", e.constraint}, {"error", e.error},
                              {"sparsity", e.sparsity}});
        print({{"layers", errors}, {"footprint", to_json(r.footprint)}});
    } else {
        fmt::print("{:>5}  {:>6}  {:<28} {:>14}  {:>8}\n", "layer", "K", "constraint", "sum (W-Q)^2", "sparsity");
        for (const auto& e : r.errors)
            fmt::print("{:>5}  {:>6}  {:<28} {:>14.6g}  {:>8.4f}\n", e.layer, e.k, e.constraint, e.error, e.sparsity);
        std::cout << format_text(r.footprint);
    }
    return 0;
}

int run_evaluate(const Options& o) {
    if (o.model.empty()) fail(ErrorCategory::usage, "--model is required");
    const ExperimentConfig c = load(o);
    const PackedModel model = load_model(o.model);
    const DatasetSplit data = load_dataset(c.data_source());
    if (o.split != "validation" && o.split != "train") fail(ErrorCategory::usage, "--split must be train or validation");
    const EvaluateResult r =
        cmd_evaluate(model, o.split == "train" ? data.train : data.validation, parse_execution_mode(o.mode));
    if (o.json) {
        print({{"error_pct", r.error_pct}, {"samples", r.samples}, {"near_ties", r.near_ties}, {"ops", to_json(r.ops)}});
    } else {
        fmt::print("error: {:.2f}% on {} samples ({} near ties)\n{}", r.error_pct, r.samples, r.near_ties,
                   format_text(r.ops));
    }
    return 0;
}

int run_sweep(const Options& o) {
    const ExperimentConfig c = load(o);
    const SweepResult r = cmd_sweep(c);
    std::cout << r.to_csv();
    return 0;
}

int run_inspect(const Options& o) {
    if (o.model.empty()) fail(ErrorCategory::usage, "--model is required");
    const PackedModel m = load_model(o.model);
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const PackedLayer& l = m.layers[i];
        nlohmann::json j{{"index", i}, {"kind", to_string(l.spec.kind)}};
        switch (l.spec.kind) {
            case LayerKind::affine:
            case LayerKind::conv2d:
                j["in"] = l.spec.in;
                j["out"] = l.spec.out;
                if (l.spec.kind == LayerKind::conv2d) {
                    j["kernel"] = l.spec.kernel;
                    j["stride"] = l.spec.stride;
                    j["padding"] = l.spec.padding;
                }
                if (l.quant) {
                    j["k"] = l.quant->dictionary.size();
                    j["constraint"] = l.quant->constraint.describe();
                    j["dictionary"] = l.quant->dictionary;
                } else {
                    j["storage"] = "dense";
                }
                break;
            case LayerKind::batchnorm:
                j["channels"] = l.spec.in;
                j["mode"] = to_string(l.spec.bn_mode);
                break;
            case LayerKind::act_quant:
                j["bits"] = l.act.bits;
                j["range"] = l.act.range;
                break;
            case LayerKind::relu: break;
        }
        layers.push_back(j);
    }
    if (o.json) {
        print({{"input_shape", m.input_shape}, {"layers", layers}});
    } else {
        fmt::print("input shape {}\n", shape_to_string(m.input_shape));
        for (const auto& l : layers) {
            std::string extra;
            for (const auto& [k, v] : l.items())
                if (k != "index" && k != "kind") extra += fmt::format(" {}={}", k, v.dump());
            fmt::print("{:>3} {:<10}{}\n", l["index"].get<std::size_t>(), l["kind"].get<std::string>(), extra);
        }
    }
    return 0;
}

int run_footprint(const Options& o) {
    if (o.model.empty()) fail(ErrorCategory::usage, "--model is required");
    const FootprintReport r = footprint_report(load_model(o.model), o.activations, o.act_bits);
    if (o.json)
        print(to_json(r));
    else
        std::cout << format_text(r);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LUT-Q training, quantization and multiplier-less inference"};
    app.require_subcommand(1);
    Options o;

    auto add_config = [&](CLI::App* c) {
        c->add_option("-c,--config", o.config, "experiment config (INI)")->required();
        c->add_option("--seed", o.seed, "override experiment.seed");
        c->add_option("-o,--output", o.output, "output directory (default: config, then LUTQ_OUTPUT_DIR)");
    };
    auto add_model = [&](CLI::App* c) { c->add_option("-m,--model", o.model, "model file (.lutq)")->required(); };
    auto add_json = [&](CLI::App* c) { c->add_flag("--json", o.json, "structured output"); };

    auto* train = app.add_subcommand("train", "train a network from a config");
    add_config(train);
    add_json(train);
    auto* quantize = app.add_subcommand("quantize", "post-hoc LUT-Q quantization of a trained model");
    add_config(quantize);
    add_model(quantize);
    add_json(quantize);
    auto* evaluate = app.add_subcommand("evaluate", "error rate and operation counts");
    add_config(evaluate);
    add_model(evaluate);
    add_json(evaluate);
    evaluate->add_option("--mode", o.mode, "dense | bucket | quasi | fully");
    evaluate->add_option("--split", o.split, "validation | train");
    auto* sweep = app.add_subcommand("sweep", "pruning ratio x bitwidth grid");
    add_config(sweep);
    auto* inspect = app.add_subcommand("inspect", "describe a model file");
    add_model(inspect);
    add_json(inspect);
    auto* footprint = app.add_subcommand("footprint", "memory footprint of a model file");
    add_model(footprint);
    add_json(footprint);
    footprint->add_flag("--activations", o.activations, "include activation memory");
    footprint->add_option("--act-bits", o.act_bits, "activation bitwidth");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ErrorCategory::usage);
    }

    try {
        if (*train) return run_train(o);
        if (*quantize) return run_quantize(o);
        if (*evaluate) return run_evaluate(o);
        if (*sweep) return run_sweep(o);
        if (*inspect) return run_inspect(o);
        if (*footprint) return run_footprint(o);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.category());
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return static_cast<int>(ErrorCategory::internal);
    }
    return static_cast<int>(ErrorCategory::usage);
}
