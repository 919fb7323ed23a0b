#include "lutq/packed_model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "lutq/errors.hpp"
#include "lutq/mlbn.hpp"
#include "lutq/numeric.hpp"

namespace lutq {

Tensor PackedLayer::weights() const {
    if (!spec.has_weights()) fail(ErrorCategory::shape, to_string(spec.kind) + " layer has no weights");
    if (!quant) return weight;
    Tensor q(spec.weight_shape());
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = quant->dictionary[quant->assignments[i]];
    return q;
}

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

DictionaryConstraint rounded_to_f32(const DictionaryConstraint& c) {
    using K = DictionaryConstraint::Kind;
    switch (c.kind()) {
        case K::fixed_set: {
            std::vector<double> v = c.fixed_values();
            for (double& x : v) x = to_f32(x);
            return DictionaryConstraint::fixed_set(std::move(v));
        }
        case K::pruned_zero: return DictionaryConstraint::pruned(c.pruning_fraction(), rounded_to_f32(c.inner()));
        default: return c;
    }
}

}  // namespace

PackedModel export_model(const Network& net) {
    PackedModel m;
    m.input_shape = net.input_shape();
    m.loss = net.loss();
    for (std::size_t i = 0; i < net.size(); ++i) {
        const LayerParams& p = net.params(i);
        PackedLayer l;
        l.spec = net.spec(i);
        if (l.spec.has_weights()) {
            if (p.quant) {
                PackedQuant q{p.quant->dictionary, p.quant->assignments, rounded_to_f32(p.quant->constraint)};
                for (double& v : q.dictionary) v = to_f32(v);
                l.quant = std::move(q);
            } else {
                l.weight = p.weight;
                for (double& v : l.weight.values()) v = to_f32(v);
            }
            l.bias = p.bias;
        } else if (l.spec.kind == LayerKind::batchnorm) {
            l.bn = p.bn;
        } else if (l.spec.kind == LayerKind::act_quant) {
            l.act = p.act;
        }
        m.layers.push_back(std::move(l));
    }
    return m;
}

Network import_model(const PackedModel& m) {
    std::vector<LayerSpec> specs;
    for (const auto& l : m.layers) specs.push_back(l.spec);
    Network net(m.input_shape, specs, 0, m.loss);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const PackedLayer& l = m.layers[i];
        LayerParams& p = net.params(i);
        if (l.spec.has_weights()) {
            p.bias = l.bias;
            if (l.quant) {
                QuantizedLayerState s;
                s.weights = l.weights();
                s.dictionary = l.quant->dictionary;
                s.assignments = l.quant->assignments;
                s.constraint = l.quant->constraint;
                p.quant = std::move(s);
                p.weight = Tensor();
            } else {
                p.weight = l.weight;
            }
        } else if (l.spec.kind == LayerKind::batchnorm) {
            p.bn = l.bn;
        } else if (l.spec.kind == LayerKind::act_quant) {
            p.act = l.act;
        }
    }
    return net;
}

std::uint64_t SerializationStats::payload_bits() const noexcept {
    std::uint64_t total = 0;
    for (const auto& l : layers) total += l.payload_bits();
    return total;
}

std::uint64_t lutq_formula_bits(std::uint64_t k, std::uint64_t n) noexcept {
    return k * kFloatBits + n * index_bits(k);
}

std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> indices, unsigned bits) {
    std::vector<std::uint8_t> out((indices.size() * bits + 7) / 8, 0);
    std::size_t pos = 0;
    for (std::uint32_t v : indices) {
        if (bits < 32 && (v >> bits) != 0)
            fail(ErrorCategory::format, "index " + std::to_string(v) + " does not fit in " + std::to_string(bits) + " bits");
        for (unsigned b = 0; b < bits; ++b, ++pos)
            if ((v >> b) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
    }
    return out;
}

std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t count, unsigned bits) {
    if (bytes.size() * 8 < count * bits) fail(ErrorCategory::format, "assignment stream too short");
    std::vector<std::uint32_t> out(count, 0);
    std::size_t pos = 0;
    for (auto& v : out)
        for (unsigned b = 0; b < bits; ++b, ++pos)
            if ((bytes[pos / 8] >> (pos % 8)) & 1u) v |= 1u << b;
    return out;
}

// --- byte streams ---------------------------------------------------------------------------

namespace {

class Writer {
public:
    template <class T>
    void put(T v) {
        using U = std::make_unsigned_t<T>;
        const auto u = static_cast<U>(v);
        for (std::size_t i = 0; i < sizeof(T); ++i) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
    void f32(double v) { put(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
    void u32(std::size_t v) {
        if (v > UINT32_MAX) fail(ErrorCategory::format, "value " + std::to_string(v) + " exceeds u32");
        put(static_cast<std::uint32_t>(v));
    }
    void raw(std::span<const std::uint8_t> b) { bytes.insert(bytes.end(), b.begin(), b.end()); }

    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

    template <class T>
    T get(const char* what) {
        need(sizeof(T), what);
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            u |= static_cast<std::make_unsigned_t<T>>(static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return static_cast<T>(u);
    }
    double f32(const char* what) { return static_cast<double>(std::bit_cast<float>(get<std::uint32_t>(what))); }
    double f64(const char* what) { return std::bit_cast<double>(get<std::uint64_t>(what)); }
    std::size_t u32(const char* what) { return get<std::uint32_t>(what); }
    std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const noexcept { return pos_; }
    bool done() const noexcept { return pos_ == bytes_.size(); }

    [[noreturn]] void error(const std::string& msg) const {
        fail(ErrorCategory::format, "model file byte " + std::to_string(pos_) + ": " + msg);
    }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n)
            fail(ErrorCategory::format, "model file truncated at byte " + std::to_string(pos_) + " while reading " + what);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

void write_constraint(Writer& w, const DictionaryConstraint& c) {
    using K = DictionaryConstraint::Kind;
    w.put(static_cast<std::uint8_t>(c.kind()));
    if (c.kind() == K::fixed_set) {
        w.u32(c.fixed_values().size());
        for (double v : c.fixed_values()) w.f64(v);
    } else if (c.kind() == K::pruned_zero) {
        w.f64(c.pruning_fraction());
        write_constraint(w, c.inner());
    }
}

DictionaryConstraint read_constraint(Reader& r) {
    using K = DictionaryConstraint::Kind;
    const auto kind = r.get<std::uint8_t>("constraint kind");
    try {
        switch (static_cast<K>(kind)) {
            case K::unconstrained: return DictionaryConstraint::unconstrained();
            case K::power_of_two: return DictionaryConstraint::power_of_two();
            case K::fixed_set: {
                const std::size_t n = r.u32("fixed set size");
                if (n > 1u << 20) r.error("fixed set of " + std::to_string(n) + " values");
                std::vector<double> v(n);
                for (double& x : v) x = r.f64("fixed set value");
                return DictionaryConstraint::fixed_set(std::move(v));
            }
            case K::pruned_zero: {
                const double fraction = r.f64("pruning fraction");
                return DictionaryConstraint::pruned(fraction, read_constraint(r));
            }
        }
    } catch (const Error& e) {
        if (e.category() == ErrorCategory::format) throw;
        r.error(std::string("invalid constraint: ") + e.what());
    }
    r.error("unknown constraint kind " + std::to_string(kind));
}

void write_channels(Writer& w, const std::vector<double>& v) {
    for (double x : v) w.f64(x);
}

std::vector<double> read_channels(Reader& r, std::size_t n, const char* what) {
    std::vector<double> v(n);
    for (double& x : v) x = r.f64(what);
    return v;
}

// Folded scale per BN channel: sign (0 zero, 1 positive, 2 negative) and exponent for pow-2 scales.
void write_bn(Writer& w, const LayerSpec& spec, const BNState& bn) {
    w.put(static_cast<std::uint8_t>(spec.bn_mode));
    w.f64(bn.epsilon);
    w.f64(bn.momentum);
    write_channels(w, bn.gamma);
    write_channels(w, bn.beta);
    write_channels(w, bn.running_mean);
    write_channels(w, bn.running_var);
    if (spec.bn_mode == BatchNormMode::multiplier_less) {
        const FoldedBN f = fold_mlbn(bn);
        for (std::size_t c = 0; c < f.channels(); ++c) {
            const double a = f.pow2_scale[c];
            w.put(static_cast<std::uint8_t>(a == 0.0 ? 0 : a > 0.0 ? 1 : 2));
            w.put(static_cast<std::int16_t>(a == 0.0 ? 0 : f.exponents[c]));
        }
        write_channels(w, f.offset);
    } else {
        const ScaleOffset f = fold_bn(bn);
        write_channels(w, f.scale);
        write_channels(w, f.offset);
    }
}

BNState read_bn(Reader& r, LayerSpec& spec) {
    const auto mode = r.get<std::uint8_t>("BN mode");
    if (mode > 1) r.error("unknown BN mode " + std::to_string(mode));
    spec.bn_mode = static_cast<BatchNormMode>(mode);
    BNState bn;
    bn.epsilon = r.f64("BN epsilon");
    bn.momentum = r.f64("BN momentum");
    const std::size_t c = spec.in;
    bn.gamma = read_channels(r, c, "BN gamma");
    bn.beta = read_channels(r, c, "BN beta");
    bn.running_mean = read_channels(r, c, "BN mean");
    bn.running_var = read_channels(r, c, "BN variance");
    try {
        bn.validate();
    } catch (const Error& e) {
        r.error(std::string("invalid BN state: ") + e.what());
    }
    // The folded section is redundant; it must agree with the raw statistics.
    bool consistent = true;
    if (spec.bn_mode == BatchNormMode::multiplier_less) {
        const FoldedBN f = fold_mlbn(bn);
        for (std::size_t i = 0; i < c; ++i) {
            const auto sign = r.get<std::uint8_t>("BN scale sign");
            const auto exp = r.get<std::int16_t>("BN scale exponent");
            const double a = sign == 0 ? 0.0 : (sign == 1 ? 1.0 : -1.0) * std::ldexp(1.0, exp);
            consistent = consistent && sign <= 2 && a == f.pow2_scale[i];
        }
        consistent = read_channels(r, c, "BN offset") == f.offset && consistent;
    } else {
        const ScaleOffset f = fold_bn(bn);
        consistent = read_channels(r, c, "BN scale") == f.scale;
        consistent = read_channels(r, c, "BN offset") == f.offset && consistent;
    }
    if (!consistent) r.error("folded BN section disagrees with the stored statistics");
    return bn;
}

}  // namespace

std::vector<std::uint8_t> serialize(const PackedModel& m, SerializationStats* stats) {
    Writer w;
    for (char c : {'L', 'U', 'T', 'Q'}) w.put(static_cast<std::uint8_t>(c));
    w.put(kFormatVersion);
    w.put(static_cast<std::uint8_t>(m.loss));
    w.put(static_cast<std::uint8_t>(m.input_shape.size()));
    for (std::size_t d : m.input_shape) w.u32(d);
    w.u32(m.layers.size());

    SerializationStats st;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const PackedLayer& l = m.layers[i];
        const LayerSpec& s = l.spec;
        w.put(static_cast<std::uint8_t>(s.kind));
        switch (s.kind) {
            case LayerKind::affine:
            case LayerKind::conv2d: {
                w.u32(s.in);
                w.u32(s.out);
                if (s.kind == LayerKind::conv2d) {
                    w.u32(s.kernel);
                    w.u32(s.stride);
                    w.u32(s.padding);
                }
                const std::size_t n = shape_size(s.weight_shape());
                LayerPayload pl;
                pl.layer = i;
                if (l.quant) {
                    const PackedQuant& q = *l.quant;
                    if (q.assignments.size() != n)
                        fail(ErrorCategory::format, "layer " + std::to_string(i) + " has " +
                                                        std::to_string(q.assignments.size()) + " assignments for " +
                                                        std::to_string(n) + " weights");
                    if (q.dictionary.empty()) fail(ErrorCategory::format, "layer " + std::to_string(i) + " has an empty dictionary");
                    w.put(std::uint8_t{1});
                    write_constraint(w, q.constraint);
                    w.u32(q.dictionary.size());
                    std::size_t before = w.bytes.size();
                    for (double v : q.dictionary) {
                        if (to_f32(v) != v)
                            fail(ErrorCategory::format, "dictionary value of layer " + std::to_string(i) +
                                                            " is not float32-representable");
                        w.f32(v);
                    }
                    pl.dictionary_bits = 8 * (w.bytes.size() - before);
                    const unsigned bits = index_bits(q.dictionary.size());
                    for (std::uint32_t a : q.assignments)
                        if (a >= q.dictionary.size())
                            fail(ErrorCategory::format, "assignment " + std::to_string(a) + " out of range in layer " +
                                                            std::to_string(i));
                    before = w.bytes.size();
                    w.raw(pack_indices(q.assignments, bits));
                    pl.assignment_bits = static_cast<std::uint64_t>(n) * bits;
                    pl.padding_bits = 8 * (w.bytes.size() - before) - pl.assignment_bits;
                } else {
                    if (l.weight.shape() != s.weight_shape())
                        fail(ErrorCategory::format, "layer " + std::to_string(i) + " weight shape mismatch");
                    w.put(std::uint8_t{0});
                    const std::size_t before = w.bytes.size();
                    for (double v : l.weight.values()) w.f32(v);
                    pl.dense_weight_bits = 8 * (w.bytes.size() - before);
                }
                if (l.bias.size() != s.out) fail(ErrorCategory::format, "layer " + std::to_string(i) + " bias size mismatch");
                write_channels(w, std::vector<double>(l.bias.values().begin(), l.bias.values().end()));
                st.layers.push_back(pl);
                break;
            }
            case LayerKind::batchnorm:
                w.u32(s.in);
                write_bn(w, s, l.bn);
                break;
            case LayerKind::relu: break;
            case LayerKind::act_quant:
                l.act.validate();
                w.put(static_cast<std::uint8_t>(l.act.bits));
                w.put(static_cast<std::int16_t>(pow2_exponent(l.act.range)));
                break;
        }
    }
    st.total_bytes = w.bytes.size();
    if (stats) *stats = std::move(st);
    return std::move(w.bytes);
}

PackedModel deserialize(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const auto magic = r.raw(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), "LUTQ")) fail(ErrorCategory::format, "not a LUTQ model file (bad magic)");
    const auto version = r.get<std::uint8_t>("version");
    if (version != kFormatVersion)
        r.error("unsupported format version " + std::to_string(version) + " (expected " +
                std::to_string(kFormatVersion) + ")");
    PackedModel m;
    const auto loss = r.get<std::uint8_t>("loss kind");
    if (loss > 1) r.error("unknown loss kind " + std::to_string(loss));
    m.loss = static_cast<LossKind>(loss);
    const auto rank = r.get<std::uint8_t>("input rank");
    if (rank == 0) r.error("input rank 0");
    for (unsigned i = 0; i < rank; ++i) {
        m.input_shape.push_back(r.u32("input extent"));
        if (m.input_shape.back() == 0) r.error("zero input extent");
    }
    const std::size_t count = r.u32("layer count");
    if (count == 0) r.error("model has no layers");

    Shape shape = m.input_shape;
    for (std::size_t i = 0; i < count; ++i) {
        PackedLayer l;
        const auto kind = r.get<std::uint8_t>("layer kind");
        switch (kind) {
            case static_cast<std::uint8_t>(LayerKind::affine):
            case static_cast<std::uint8_t>(LayerKind::conv2d): {
                const std::size_t in = r.u32("input size"), out = r.u32("output size");
                if (kind == static_cast<std::uint8_t>(LayerKind::affine)) {
                    if (in == 0 || out == 0) r.error("affine layer with zero extent");
                    l.spec = LayerSpec::affine(in, out);
                } else {
                    const std::size_t k = r.u32("kernel"), stride = r.u32("stride"), pad = r.u32("padding");
                    try {
                        l.spec = LayerSpec::conv2d(in, out, k, stride, pad);
                    } catch (const Error& e) {
                        r.error(e.what());
                    }
                }
                const std::size_t n = shape_size(l.spec.weight_shape());
                const auto storage = r.get<std::uint8_t>("weight storage");
                if (storage == 1) {
                    PackedQuant q;
                    q.constraint = read_constraint(r);
                    const std::size_t k = r.u32("dictionary size");
                    if (k == 0) r.error("empty dictionary");
                    if (k > bytes.size()) r.error("dictionary size " + std::to_string(k) + " exceeds file size");
                    q.dictionary.resize(k);
                    for (double& v : q.dictionary) v = r.f32("dictionary value");
                    const unsigned bits = index_bits(k);
                    const std::size_t stream = (n * bits + 7) / 8;
                    const std::size_t at = r.pos();
                    q.assignments = unpack_indices(r.raw(stream, "assignments"), n, bits);
                    for (std::uint32_t a : q.assignments)
                        if (a >= k)
                            fail(ErrorCategory::format, "model file byte " + std::to_string(at) + ": assignment " +
                                                            std::to_string(a) + " exceeds dictionary size " +
                                                            std::to_string(k));
                    l.quant = std::move(q);
                } else if (storage == 0) {
                    l.weight = Tensor(l.spec.weight_shape());
                    for (double& v : l.weight.values()) v = r.f32("weight");
                } else {
                    r.error("unknown weight storage " + std::to_string(storage));
                }
                l.bias = Tensor({out}, read_channels(r, out, "bias"));
                break;
            }
            case static_cast<std::uint8_t>(LayerKind::batchnorm): {
                const std::size_t c = r.u32("BN channels");
                if (c == 0) r.error("BN layer with zero channels");
                l.spec = LayerSpec::batchnorm(c);
                l.bn = read_bn(r, l.spec);
                break;
            }
            case static_cast<std::uint8_t>(LayerKind::relu): l.spec = LayerSpec::relu(); break;
            case static_cast<std::uint8_t>(LayerKind::act_quant): {
                const int bits = r.get<std::uint8_t>("activation bits");
                const int exp = r.get<std::int16_t>("activation range exponent");
                try {
                    l.spec = LayerSpec::act_quant(bits);
                    l.act = ActQuantSpec{bits, std::ldexp(1.0, exp)};
                    l.act.validate();
                } catch (const Error& e) {
                    r.error(e.what());
                }
                break;
            }
            default: r.error("unknown layer kind " + std::to_string(kind));
        }
        try {
            shape = layer_output_shape(l.spec, shape);
        } catch (const Error& e) {
            r.error("layer " + std::to_string(i) + ": " + e.what());
        }
        m.layers.push_back(std::move(l));
    }
    if (!r.done()) r.error("trailing bytes after the last layer");
    return m;
}

void save_model(const PackedModel& model, const std::filesystem::path& path, SerializationStats* stats) {
    const auto bytes = serialize(model, stats);
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCategory::data, "cannot write model file " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCategory::data, "failed writing model file " + path.string());
}

PackedModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCategory::data, "cannot open model file " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

FootprintReport footprint_report(const PackedModel& m, bool include_activations, int act_bits) {
    FootprintReport r;
    Shape shape = m.input_shape;
    std::uint64_t peak = shape_size(shape), sum = shape_size(shape);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const PackedLayer& l = m.layers[i];
        shape = layer_output_shape(l.spec, shape);
        peak = std::max<std::uint64_t>(peak, shape_size(shape));
        sum += shape_size(shape);
        if (!l.spec.has_weights()) continue;
        LayerFootprint f;
        f.layer = i;
        f.kind = l.spec.kind;
        f.weights = shape_size(l.spec.weight_shape());
        f.baseline_bits = f.weights * kFloatBits;
        if (l.quant) {
            f.dictionary = l.quant->dictionary.size();
            if (f.dictionary > f.weights)
                fail(ErrorCategory::config, "layer " + std::to_string(i) + ": dictionary size K=" +
                                                std::to_string(f.dictionary) + " exceeds weight count N=" +
                                                std::to_string(f.weights));
            f.bits = lutq_formula_bits(f.dictionary, f.weights);
        } else {
            f.bits = f.baseline_bits;
        }
        r.total_bits += f.bits;
        r.baseline_bits += f.baseline_bits;
        r.layers.push_back(f);
    }
    if (include_activations) {
        if (act_bits < 1) fail(ErrorCategory::config, "activation bitwidth must be positive");
        r.activations_included = true;
        r.activation_bits = act_bits;
        r.activation_peak_bits = peak * static_cast<std::uint64_t>(act_bits);
        r.activation_sum_bits = sum * static_cast<std::uint64_t>(act_bits);
    }
    return r;
}

}  // namespace lutq
