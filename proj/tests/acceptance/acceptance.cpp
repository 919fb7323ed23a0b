// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>

#include <fmt/format.h>

#include "lutq/experiment.hpp"
#include "lutq/mlbn.hpp"
#include "lutq/numeric.hpp"
#include "model_builders.hpp"

using namespace lutq;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& name, double limit_seconds, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < limit_seconds;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    fmt::print("{} [{}] {}: {} ({:.2f} s of {:.0f} s{})\n", pass ? "PASS" : "FAIL", id, name, o.detail, secs,
               limit_seconds, in_time ? "" : ", too slow");
    std::fflush(stdout);
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

// --- 1 ------------------------------------------------------------------------------------

Outcome bn_folding() {
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> u(-2.0, 2.0), var(0.01, 4.0), eps(1e-6, 1e-2);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t c = 1 + rng() % 8;
        BNState s = BNState::identity(c);
        s.epsilon = eps(rng);
        for (std::size_t j = 0; j < c; ++j) {
            s.gamma[j] = u(rng);
            s.beta[j] = u(rng);
            s.running_mean[j] = u(rng);
            s.running_var[j] = var(rng);
        }
        const Tensor x({4, c}, random_values(rng, 4 * c, -3, 3));
        const Tensor y = folded_bn_infer(x, fold_bn(s));
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const double sd = std::sqrt(s.running_var[j] + s.epsilon);
                const double direct = s.gamma[j] * (x[i * c + j] - s.running_mean[j]) / sd + s.beta[j];
                worst = std::max(worst, std::fabs(direct - y[i * c + j]));
            }
    }
    return {worst <= 1e-12, fmt::format("max deviation {:.3g} over 1000 states", worst)};
}

// --- 2 ------------------------------------------------------------------------------------

Outcome gradients() {
    std::mt19937_64 rng(202);
    double worst = 0.0;
    std::size_t checked = 0;
    for (int t = 0; t < 100; ++t) {
        std::vector<LayerSpec> layers;
        Shape input;
        LossKind loss = t % 2 ? LossKind::softmax_cross_entropy : LossKind::squared_error;
        switch (t % 4) {
            case 0:
                input = {5};
                layers = {LayerSpec::affine(5, 3)};
                break;
            case 1:
                input = {2, 5, 5};
                layers = {LayerSpec::conv2d(2, 3, 3, 2, 1), LayerSpec::relu(), LayerSpec::affine(27, 3)};
                break;
            case 2:
                input = {4};
                layers = {LayerSpec::affine(4, 6), LayerSpec::batchnorm(6), LayerSpec::relu(), LayerSpec::affine(6, 3)};
                break;
            default:
                input = {1, 6, 6};
                layers = {LayerSpec::conv2d(1, 2, 3), LayerSpec::batchnorm(2), LayerSpec::relu(),
                          LayerSpec::conv2d(2, 2, 3, 1, 1), LayerSpec::relu(), LayerSpec::affine(32, 3)};
        }
        Network net(input, layers, rng(), loss);
        for (std::size_t i = 0; i < net.size(); ++i) {
            if (net.spec(i).has_weights())
                for (double& b : net.params(i).bias.values()) b = random_values(rng, 1, -0.3, 0.3)[0];
            if (net.spec(i).kind == LayerKind::batchnorm) builders::randomize_bn(net.params(i).bn, rng);
        }
        const std::size_t n = 4;
        Shape xs{n};
        xs.insert(xs.end(), input.begin(), input.end());
        const Tensor x = oracle::random_tensor(xs, rng);
        Tensor target;
        if (loss == LossKind::softmax_cross_entropy) {
            target = Tensor({n});
            for (std::size_t i = 0; i < n; ++i) target[i] = static_cast<double>(rng() % 3);
        } else {
            target = oracle::random_tensor({n, 3}, rng);
        }
        const TrainingGraph tg = build_training_graph(net, n);
        const TensorMap bindings = training_bindings(net, x, target);
        const GradientMap grads = backprop(tg.graph, evaluate(tg.graph, bindings), tg.loss);
        for (std::size_t i = 0; i < net.size(); ++i) {
            std::vector<std::string> names;
            if (net.spec(i).has_weights()) {
                names = {Network::weight_name(i), Network::bias_name(i)};
                // A bias feeding batch statistics has an identically zero gradient.
                if (i + 1 < net.size() && net.spec(i + 1).kind == LayerKind::batchnorm) {
                    const Tensor zero(net.params(i).bias.shape());
                    if (max_abs_diff(grads.at(Network::bias_name(i)), zero) > 1e-10)
                        return {false, "nonzero bias gradient before BN"};
                    names.pop_back();
                }
            } else if (net.spec(i).kind == LayerKind::batchnorm) {
                names = {Network::gamma_name(i), Network::beta_name(i)};
            }
            for (const auto& name : names) {
                worst = std::max(worst, finite_difference_check(tg.graph, bindings, name, tg.loss, 1e-5));
                ++checked;
            }
        }
    }
    return {worst <= 1e-4, fmt::format("max relative error {:.3g} over {} parameter tensors in 100 nets", worst, checked)};
}

// --- 3 ------------------------------------------------------------------------------------

Outcome kmeans_oracle() {
    std::mt19937_64 rng(303);
    std::size_t fixed_points = 0, global = 0, monotone_violations = 0;
    double worst = 0.0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 1 + rng() % 8, k = 1 + rng() % 3;
        const auto w = random_values(rng, n, -2, 2);
        QuantizedLayerState s = init_quantized_layer(Tensor({n}, w), k, DictionaryConstraint::unconstrained());
        // Start each run from a random dictionary so Lloyd has work to do.
        s.dictionary = random_values(rng, s.dictionary.size(), -2, 2);
        std::sort(s.dictionary.begin(), s.dictionary.end());
        s.assignments = assign_step(w, s.dictionary);
        KMeansTrace trace;
        s = kmeans_update(std::move(s), 100, &trace);
        for (std::size_t i = 1; i < trace.errors.size(); ++i)
            monotone_violations += trace.errors[i] > trace.errors[i - 1] * (1 + 1e-12) + 1e-15;
        const std::size_t kk = s.dictionary.size();
        const bool fixed = assign_step(w, s.dictionary) == s.assignments &&
                           centroid_step(w, s.assignments, s.dictionary) == s.dictionary;
        fixed_points += fixed;
        const double e = quantization_error(s);
        // Empty clusters keep their centroid, so compare over the clusters in use.
        worst = std::max(worst, std::fabs(e - oracle::partition_error(w, s.assignments, kk)));
        global += e <= oracle::best_partition_error(w, kk) + 1e-12;
    }
    const bool pass = fixed_points == 200 && worst <= 1e-12 && monotone_violations == 0;
    return {pass, fmt::format("{}/200 fixed points, partition error gap {:.3g}, {} monotonicity violations, "
                              "{}/200 also globally optimal",
                              fixed_points, worst, monotone_violations, global)};
}

// --- 4 ------------------------------------------------------------------------------------

Outcome memory_formula() {
    std::mt19937_64 rng(404);
    std::size_t cases = 0, exact = 0, lossless = 0;
    for (std::size_t n : {7, 1000, 65536})
        for (std::size_t k : {1, 2, 4, 16, 256}) {
            PackedModel m;
            m.input_shape = {n};
            PackedLayer l;
            l.spec = LayerSpec::affine(n, 1);
            PackedQuant q;
            q.dictionary = random_values(rng, k, -1, 1);
            for (double& d : q.dictionary) d = static_cast<double>(static_cast<float>(d));
            q.assignments.resize(n);
            for (auto& a : q.assignments) a = static_cast<std::uint32_t>(rng() % k);
            l.quant = std::move(q);
            l.bias = Tensor({1});
            m.layers.push_back(std::move(l));
            SerializationStats st;
            const auto bytes = serialize(m, &st);
            ++cases;
            exact += st.payload_bits() == lutq_formula_bits(k, n) &&
                     lutq_formula_bits(k, n) == k * 32 + n * static_cast<std::size_t>(std::ceil(std::log2(k)));
            lossless += deserialize(bytes) == m;
        }
    return {exact == cases && lossless == cases,
            fmt::format("{}/{} payloads bit-exact, {}/{} round trips lossless", exact, cases, lossless, cases)};
}

// --- 5 ------------------------------------------------------------------------------------

Outcome multiplication_count() {
    std::mt19937_64 rng(505);
    PackedModel m;
    m.input_shape = {512};
    PackedLayer l;
    l.spec = LayerSpec::affine(512, 10);
    PackedQuant q;
    for (int j = 0; j < 16; ++j) q.dictionary.push_back(0.125 * (j - 8) + 0.0625);
    for (std::size_t i = 0; i < 5120; ++i) q.assignments.push_back(static_cast<std::uint32_t>(rng() % 16));
    l.quant = std::move(q);
    l.bias = Tensor({10});
    m.layers.push_back(std::move(l));
    const Tensor x = oracle::random_tensor({1, 512}, rng);
    const auto bucket = run_inference(m, x, ExecutionMode::bucket).ops.totals().multiplications;
    const auto dense = run_inference(m, x, ExecutionMode::dense).ops.totals().multiplications;

    std::uint64_t fully = 0;
    for (int t = 0; t < 10; ++t) {
        const Network net = builders::random_pow2_network(rng, t % 2 == 1, BatchNormMode::multiplier_less);
        fully += run_inference(export_model(net), builders::random_batch(net, 8, rng), ExecutionMode::fully)
                     .ops.totals()
                     .multiplications;
    }
    return {bucket == 160 && dense == 5120 && fully == 0,
            fmt::format("bucket {} vs dense {} multiplications; fully multiplier-less total {}", bucket, dense, fully)};
}

// --- 6 and 7 ------------------------------------------------------------------------------

// Desk-scale defaults shared by the training criteria and documented in the README.
ExperimentConfig desk_config(std::uint64_t seed, bool act_quant) {
    ExperimentConfig c;
    c.seed = seed;
    c.data.generator = "two-spirals";
    c.data.samples = 1000;
    c.data.noise = 0.02;
    if (act_quant)
        c.layers = {"act_quant", "affine:64", "batchnorm", "relu", "act_quant", "affine:64",
                    "batchnorm", "relu",      "act_quant", "affine:2"};
    else
        c.layers = {"affine:64", "batchnorm", "relu", "affine:64", "batchnorm", "relu", "affine:2"};
    c.optimizer.epochs = 60;
    c.optimizer.batch_size = 32;
    c.optimizer.learning_rate = 0.1;
    c.optimizer.lr_decay = 0.3;
    c.optimizer.lr_decay_every = 25;
    return c;
}

ExperimentConfig lutq_config(std::uint64_t seed, std::size_t k, DictionaryConstraint constraint, BatchNormMode bn) {
    ExperimentConfig c = desk_config(seed, true);
    c.bn_mode = bn;
    c.quant.enabled = true;
    c.quant.k = k;
    c.quant.constraint = std::move(constraint);
    return c;
}

Outcome training_behavior() {
    std::vector<double> fp, q4, p4, q2;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const ExperimentConfig base = desk_config(seed, false);
        const DatasetSplit data = load_dataset(base.data_source());
        fp.push_back(train(base, data).validation_error_pct);
        q4.push_back(train(lutq_config(seed, 16, DictionaryConstraint::unconstrained(), BatchNormMode::standard), data)
                         .validation_error_pct);
        const TrainResult pow2 =
            train(lutq_config(seed, 16, DictionaryConstraint::power_of_two(), BatchNormMode::multiplier_less), data);
        p4.push_back(cmd_evaluate(pow2.model, data.validation, ExecutionMode::fully).error_pct);
        q2.push_back(train(lutq_config(seed, 4, DictionaryConstraint::unconstrained(), BatchNormMode::standard), data)
                         .validation_error_pct);
    }
    const double b = median(fp), m4 = median(q4), mp = median(p4), m2 = median(q2);
    const bool a_ok = b <= 10.0, b_ok = m4 - b <= 2.0, c_ok = mp - b <= 5.0, d_ok = m2 >= m4 - 0.5;
    return {a_ok && b_ok && c_ok && d_ok,
            fmt::format("median val error: fp {:.1f}% ({}), 4-bit {:.1f}% ({}), 4-bit pow2+mlbn fully {:.1f}% ({}), "
                        "2-bit {:.1f}% ({})",
                        b, a_ok ? "ok" : "> 10", m4, b_ok ? "ok" : "> fp+2", mp, c_ok ? "ok" : "> fp+5", m2,
                        d_ok ? "ok" : "< 4-bit-0.5")};
}

Outcome pruning_sweep() {
    const std::vector<double> ratios{0.0, 0.3, 0.5, 0.7, 0.9};
    const std::vector<unsigned> bits{2, 4};
    // errors[bits][ratio] over seeds
    std::map<std::pair<unsigned, double>, std::vector<double>> increase;
    double min_sparsity = 1.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ExperimentConfig c = desk_config(seed, false);
        c.sweep.ratios = ratios;
        c.sweep.bits = bits;
        const SweepResult r = run_sweep(c, load_dataset(c.data_source()));
        for (const SweepRow& row : r.rows) {
            increase[{row.bits, row.ratio}].push_back(row.increase_pct);
            if (row.ratio == 0.7 && row.bits == 2) min_sparsity = std::min(min_sparsity, row.sparsity);
        }
    }
    const double pruned_increase = median(increase[{2, 0.7}]);
    bool monotone = true;
    std::string table;
    for (unsigned b : bits) {
        table += fmt::format(" {}-bit:", b);
        for (std::size_t i = 0; i < ratios.size(); ++i) {
            const double v = median(increase[{b, ratios[i]}]);
            table += fmt::format(" {:+.1f}", v);
            if (i > 0 && v < median(increase[{b, ratios[i - 1]}]) - 1.0) monotone = false;
        }
    }
    const bool pass = min_sparsity >= 0.7 && pruned_increase <= 5.0 && monotone;
    return {pass, fmt::format("70%/2-bit: min sparsity {:.4f}, median increase {:+.1f} points; monotone in ratio: {};"
                              " median increase by ratio {{0,.3,.5,.7,.9}}:{}",
                              min_sparsity, pruned_increase, monotone ? "yes" : "no", table)};
}

// --- 8 ------------------------------------------------------------------------------------

Outcome constraint_invariants() {
    std::mt19937_64 rng(808);
    const std::vector<std::pair<DictionaryConstraint, std::size_t>> variants{
        {DictionaryConstraint::unconstrained(), 4},
        {DictionaryConstraint::power_of_two(), 4},
        {DictionaryConstraint::binary(), 2},
        {DictionaryConstraint::ternary(), 3},
        {DictionaryConstraint::fixed_set({-0.5, 0.25, 1.0}), 3},
        {DictionaryConstraint::pruned(0.7), 4},
        {DictionaryConstraint::pruned(0.5, DictionaryConstraint::power_of_two()), 4},
    };
    std::size_t steps = 0;
    std::string broken;
    for (const auto& [constraint, k] : variants) {
        Network net({6}, {LayerSpec::affine(6, 12), LayerSpec::relu(), LayerSpec::affine(12, 3)}, rng());
        net.quantize_layer(0, k, constraint);
        net.quantize_layer(2, k, constraint);
        for (int step = 0; step < 1000 && broken.empty(); ++step) {
            const Tensor x = oracle::random_tensor({8, 6}, rng);
            Tensor y({8});
            for (std::size_t i = 0; i < 8; ++i) y[i] = static_cast<double>(rng() % 3);
            StepOptions o;
            o.learning_rate = 0.05;
            o.kmeans_iterations = 1 + step % 3;
            lutq_train_step(net, x, y, o);
            ++steps;
            for (std::size_t i : {0, 2}) {
                const QuantizedLayerState& s = *net.params(i).quant;
                try {
                    check_invariants(s);
                } catch (const std::exception& e) {
                    broken = constraint.describe() + ": " + e.what();
                }
                for (auto a : s.assignments)
                    if (a >= s.dictionary.size()) broken = constraint.describe() + ": assignment out of range";
                if (constraint.kind() == DictionaryConstraint::Kind::fixed_set && s.dictionary != constraint.fixed_values())
                    broken = constraint.describe() + ": fixed set changed";
                if (constraint.is_pruned() && (s.dictionary[0] != 0.0 || sparsity(s) < constraint.pruning_fraction()))
                    broken = constraint.describe() + ": pruned entry or sparsity violated";
                if (constraint.effective().kind() == DictionaryConstraint::Kind::power_of_two)
                    for (double d : s.dictionary)
                        if (d != 0.0 && !is_pow2_value(d)) broken = constraint.describe() + ": non power of two";
            }
        }
    }
    return {broken.empty(), broken.empty() ? fmt::format("{} train steps over {} variants intact", steps, variants.size())
                                           : broken};
}

// --- 9 ------------------------------------------------------------------------------------

Outcome cross_mode() {
    std::mt19937_64 rng(909);
    double worst = 0.0;
    std::size_t same_predictions = 0;
    for (int t = 0; t < 100; ++t) {
        const Network net = builders::random_pow2_network(rng, t % 2 == 1,
                                                          t % 4 < 2 ? BatchNormMode::multiplier_less : BatchNormMode::standard);
        const PackedModel m = export_model(net);
        const Tensor x = builders::random_batch(net, 6, rng);
        const Tensor dense = run_inference(m, x, ExecutionMode::dense).output;
        const Tensor bucket = run_inference(m, x, ExecutionMode::bucket).output;
        // Standard BN cannot be shifted; quasi mode runs the same shift kernels with a BN multiply.
        const ExecutionMode shift = net.spec(2).bn_mode == BatchNormMode::multiplier_less ? ExecutionMode::fully
                                                                                           : ExecutionMode::quasi;
        const Tensor shifted = run_inference(m, x, shift).output;
        worst = std::max({worst, max_abs_diff(dense, bucket), max_abs_diff(dense, shifted)});
        same_predictions += argmax_rows(dense) == argmax_rows(bucket) && argmax_rows(dense) == argmax_rows(shifted);
    }
    return {worst <= 1e-9 && same_predictions == 100,
            fmt::format("max output gap {:.3g}; identical predictions on {}/100 models", worst, same_predictions)};
}

}  // namespace

int main() {
    criterion(1, "BN folding identity", 1, bn_folding);
    criterion(2, "gradient correctness", 30, gradients);
    criterion(3, "k-means oracle and Lloyd monotonicity", 10, kmeans_oracle);
    criterion(4, "memory formula bit-exactness", 5, memory_formula);
    criterion(5, "multiplication counts", 5, multiplication_count);
    criterion(6, "desk-scale training behavior", 300, training_behavior);
    criterion(7, "pruning sweep", 600, pruning_sweep);
    criterion(8, "constraint invariants", 30, constraint_invariants);
    criterion(9, "cross-mode inference agreement", 10, cross_mode);
    fmt::print("{} of 9 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
