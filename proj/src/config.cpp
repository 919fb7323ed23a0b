#include "lutq/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lutq/errors.hpp"

namespace lutq {

namespace pt = boost::property_tree;

namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

template <typename T>
T parse_number(std::string_view text, const std::string& what) {
    text = trim(text);
    T v{};
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || ec != std::errc{} || p != text.data() + text.size())
        fail(ErrorCategory::config, what + ": cannot parse '" + std::string(text) + "'");
    if constexpr (std::is_floating_point_v<T>)
        if (!std::isfinite(v)) fail(ErrorCategory::config, what + ": value must be finite");
    return v;
}

bool parse_bool(std::string_view text, const std::string& what) {
    text = trim(text);
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    fail(ErrorCategory::config, what + ": expected true or false, got '" + std::string(text) + "'");
}

BatchNormMode parse_bn_mode(std::string_view text, const std::string& what) {
    text = trim(text);
    if (text == "standard") return BatchNormMode::standard;
    if (text == "mlbn" || text == "multiplier_less" || text == "multiplier-less") return BatchNormMode::multiplier_less;
    fail(ErrorCategory::config, what + ": unknown BN mode '" + std::string(text) + "' (standard, mlbn)");
}

// Layer index from a key suffix such as "k_L3".
std::optional<std::size_t> layer_suffix(const std::string& key, const std::string& prefix) {
    if (key.size() <= prefix.size() + 2 || key.compare(0, prefix.size(), prefix) != 0 ||
        key.compare(prefix.size(), 2, "_L") != 0)
        return std::nullopt;
    return parse_number<std::size_t>(std::string_view(key).substr(prefix.size() + 2), "layer index in '" + key + "'");
}

}  // namespace

std::map<std::size_t, LayerQuantPlan> QuantizationPlan::resolve(const std::vector<LayerSpec>& layers) const {
    auto check = [&](std::size_t i, const char* what) {
        if (i >= layers.size() || !layers[i].has_weights())
            fail(ErrorCategory::config, std::string(what) + " refers to layer " + std::to_string(i) +
                                            ", which is not an affine or conv2d layer");
    };
    for (const auto& [i, _] : k_overrides) check(i, "k override");
    for (const auto& [i, _] : constraint_overrides) check(i, "constraint override");
    for (const auto& [i, _] : iteration_overrides) check(i, "iterations override");
    for (std::size_t i : skip) check(i, "skip list");

    std::map<std::size_t, LayerQuantPlan> plan;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!layers[i].has_weights() || skip.contains(i)) continue;
        LayerQuantPlan p;
        p.constraint = constraint_overrides.contains(i) ? constraint_overrides.at(i) : constraint;
        p.k = k_overrides.contains(i) ? k_overrides.at(i) : k;
        if (p.k == 0) {
            const Shape ws = layers[i].weight_shape();
            p.k = shape_size(ws);
        }
        if (p.constraint.kind() == DictionaryConstraint::Kind::fixed_set && !k_overrides.contains(i))
            p.k = p.constraint.required_size();
        p.iterations = iteration_overrides.contains(i) ? iteration_overrides.at(i) : iterations;
        if (p.k == 0) fail(ErrorCategory::config, "layer " + std::to_string(i) + ": K must be at least 1");
        plan.emplace(i, p);
    }
    return plan;
}

double OptimizerConfig::rate_at(std::size_t epoch) const {
    if (lr_decay_every == 0 || epoch == 0) return learning_rate;
    return learning_rate * std::pow(lr_decay, static_cast<double>((epoch - 1) / lr_decay_every));
}

DataSource ExperimentConfig::data_source() const {
    DataSource d = data;
    d.seed = data_seed.value_or(seed);
    return d;
}

void ExperimentConfig::validate() const {
    if (layers.empty()) fail(ErrorCategory::config, "network.layers is empty");
    if (activation_bits < 2 || activation_bits > 16) fail(ErrorCategory::config, "activation bitwidth must be in 2..16");
    if (!(optimizer.learning_rate >= 0)) fail(ErrorCategory::config, "learning rate must be non-negative");
    if (!(optimizer.lr_decay > 0)) fail(ErrorCategory::config, "lr_decay must be positive");
    if (optimizer.epochs == 0) fail(ErrorCategory::config, "epochs must be at least 1");
    if (optimizer.batch_size < 2) fail(ErrorCategory::config, "batch_size must be at least 2");
    if (quant.enabled && quant.start_epoch >= optimizer.epochs)
        fail(ErrorCategory::config, "quantize.start_epoch must be smaller than train.epochs");
    for (double r : sweep.ratios)
        if (!(r >= 0.0 && r < 1.0)) fail(ErrorCategory::config, "sweep ratios must be in [0, 1)");
    for (unsigned b : sweep.bits)
        if (b > 16) fail(ErrorCategory::config, "sweep bits must be in 0..16");
}

DictionaryConstraint parse_constraint(std::string_view text) {
    text = trim(text);
    if (text == "unconstrained") return DictionaryConstraint::unconstrained();
    if (text == "pow2") return DictionaryConstraint::power_of_two();
    if (text == "binary") return DictionaryConstraint::binary();
    if (text == "ternary") return DictionaryConstraint::ternary();
    if (text.starts_with("fixed:")) {
        std::vector<double> values;
        for (const auto& v : split(text.substr(6), ',')) values.push_back(parse_number<double>(v, "fixed set value"));
        for (std::size_t i = 1; i < values.size(); ++i)
            if (!(values[i] > values[i - 1]))
                fail(ErrorCategory::config, "fixed set values must be strictly increasing");
        if (values.empty()) fail(ErrorCategory::config, "fixed set is empty");
        return DictionaryConstraint::fixed_set(std::move(values));
    }
    if (text.starts_with("pruned:")) {
        const std::string_view rest = text.substr(7);
        const auto colon = rest.find(':');
        const double p = parse_number<double>(rest.substr(0, colon), "pruning fraction");
        if (!(p >= 0.0 && p <= 1.0)) fail(ErrorCategory::config, "pruning fraction must be in [0, 1]");
        DictionaryConstraint inner =
            colon == std::string_view::npos ? DictionaryConstraint::unconstrained() : parse_constraint(rest.substr(colon + 1));
        if (inner.is_pruned()) fail(ErrorCategory::config, "pruned constraints cannot nest");
        return DictionaryConstraint::pruned(p, std::move(inner));
    }
    fail(ErrorCategory::config, "unknown constraint '" + std::string(text) +
                                    "' (unconstrained, pow2, binary, ternary, fixed:..., pruned:p[:inner])");
}

std::vector<LayerSpec> build_layers(const std::vector<std::string>& tokens, const Shape& input, int activation_bits,
                                    BatchNormMode bn_mode) {
    std::vector<LayerSpec> layers;
    Shape shape = input;
    for (const std::string& token : tokens) {
        const auto parts = split(token, ':');
        const std::string& kind = parts[0];
        const std::string where = "layer " + std::to_string(layers.size()) + " '" + token + "'";
        auto arg = [&](std::size_t i) { return parse_number<std::size_t>(parts.at(i), where); };
        auto expect = [&](std::size_t lo, std::size_t hi) {
            if (parts.size() < lo || parts.size() > hi) fail(ErrorCategory::config, where + ": wrong number of fields");
        };
        const std::size_t channels = shape.empty() ? 0 : shape[0];
        LayerSpec spec;
        if (kind == "affine") {
            expect(2, 2);
            spec = LayerSpec::affine(shape_size(shape), arg(1));
        } else if (kind == "conv2d") {
            expect(3, 5);
            if (shape.size() != 3) fail(ErrorCategory::config, where + ": conv2d needs a [C, H, W] input");
            spec = LayerSpec::conv2d(channels, arg(1), arg(2), parts.size() > 3 ? arg(3) : 1, parts.size() > 4 ? arg(4) : 0);
        } else if (kind == "batchnorm") {
            expect(1, 2);
            spec = LayerSpec::batchnorm(channels, parts.size() > 1 ? parse_bn_mode(parts[1], where) : bn_mode);
        } else if (kind == "relu") {
            expect(1, 1);
            spec = LayerSpec::relu();
        } else if (kind == "act_quant") {
            expect(1, 2);
            spec = LayerSpec::act_quant(parts.size() > 1 ? static_cast<int>(arg(1)) : activation_bits);
            if (spec.bits < 2 || spec.bits > 16) fail(ErrorCategory::config, where + ": bitwidth must be in 2..16");
        } else {
            fail(ErrorCategory::config, where + ": unknown layer kind (affine, conv2d, batchnorm, relu, act_quant)");
        }
        if ((spec.kind == LayerKind::affine || spec.kind == LayerKind::conv2d) && (spec.out == 0 || spec.kernel == 0))
            fail(ErrorCategory::config, where + ": sizes must be positive");
        try {
            shape = layer_output_shape(spec, shape);
        } catch (const Error& e) {
            fail(ErrorCategory::config, where + ": " + e.what());
        }
        layers.push_back(spec);
    }
    return layers;
}

ExperimentConfig parse_config(std::string_view text) {
    pt::ptree tree;
    std::istringstream in{std::string(text)};
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        fail(ErrorCategory::config, "config line " + std::to_string(e.line()) + ": " + e.message());
    }

    ExperimentConfig c;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            fail(ErrorCategory::config, "key '" + section + "' must be inside a section");
        for (const auto& [key, node] : body) {
            const std::string& v = node.data();
            const std::string what = section + "." + key;
            auto size = [&] { return parse_number<std::size_t>(v, what); };
            auto real = [&] { return parse_number<double>(v, what); };
            bool known = true;
            if (section == "experiment") {
                if (key == "name") c.name = v;
                else if (key == "seed") c.seed = parse_number<std::uint64_t>(v, what);
                else if (key == "output_dir") c.output_dir = v;
                else known = false;
            } else if (section == "data") {
                if (key == "source") {
                    if (v == "synthetic") c.data.kind = DataSource::Kind::synthetic;
                    else if (v == "csv") c.data.kind = DataSource::Kind::csv;
                    else if (v == "idx") c.data.kind = DataSource::Kind::idx;
                    else fail(ErrorCategory::config, what + ": unknown source '" + v + "' (synthetic, csv, idx)");
                } else if (key == "generator") c.data.generator = v;
                else if (key == "samples") c.data.samples = size();
                else if (key == "noise") c.data.noise = real();
                else if (key == "classes") c.data.classes = size();
                else if (key == "path") c.data.path = v;
                else if (key == "images") c.data.images = v;
                else if (key == "labels") c.data.labels = v;
                else if (key == "validation_fraction") c.data.validation_fraction = real();
                else if (key == "normalize") c.data.normalize = parse_bool(v, what);
                else if (key == "seed") c.data_seed = parse_number<std::uint64_t>(v, what);
                else known = false;
            } else if (section == "network") {
                if (key == "layers") c.layers = split(v, ',');
                else if (key == "activation_bits") c.activation_bits = static_cast<int>(size());
                else if (key == "bn_mode") c.bn_mode = parse_bn_mode(v, what);
                else if (key == "loss") {
                    if (v == "cross_entropy") c.loss = LossKind::softmax_cross_entropy;
                    else if (v == "squared_error") c.loss = LossKind::squared_error;
                    else fail(ErrorCategory::config, what + ": unknown loss '" + v + "' (cross_entropy, squared_error)");
                } else known = false;
            } else if (section == "train") {
                if (key == "epochs") c.optimizer.epochs = size();
                else if (key == "batch_size") c.optimizer.batch_size = size();
                else if (key == "learning_rate") c.optimizer.learning_rate = real();
                else if (key == "lr_decay") c.optimizer.lr_decay = real();
                else if (key == "lr_decay_every") c.optimizer.lr_decay_every = size();
                else known = false;
            } else if (section == "quantize") {
                QuantizationPlan& q = c.quant;
                if (key == "enabled") q.enabled = parse_bool(v, what);
                else if (key == "k") q.k = size();
                else if (key == "bits") {
                    const std::size_t b = size();
                    if (b > 16) fail(ErrorCategory::config, what + ": at most 16 bits");
                    q.k = std::size_t{1} << b;
                } else if (key == "constraint") q.constraint = parse_constraint(v);
                else if (key == "iterations") q.iterations = size();
                else if (key == "start_epoch") q.start_epoch = size();
                else if (key == "skip") {
                    for (const auto& s : split(v, ','))
                        if (!s.empty()) q.skip.insert(parse_number<std::size_t>(s, what));
                } else if (auto i = layer_suffix(key, "k")) q.k_overrides[*i] = size();
                else if (auto i2 = layer_suffix(key, "constraint")) q.constraint_overrides[*i2] = parse_constraint(v);
                else if (auto i3 = layer_suffix(key, "iterations")) q.iteration_overrides[*i3] = size();
                else known = false;
            } else if (section == "sweep") {
                if (key == "ratios") {
                    for (const auto& s : split(v, ',')) c.sweep.ratios.push_back(parse_number<double>(s, what));
                } else if (key == "bits") {
                    for (const auto& s : split(v, ',')) c.sweep.bits.push_back(parse_number<unsigned>(s, what));
                } else known = false;
            } else {
                fail(ErrorCategory::config, "unknown section [" + section + "]");
            }
            if (!known) fail(ErrorCategory::config, "unknown key '" + key + "' in section [" + section + "]");
        }
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCategory::config, "cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

}  // namespace lutq
