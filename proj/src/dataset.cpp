#include "lutq/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>

#include "lutq/errors.hpp"

namespace lutq {

Shape Dataset::sample_shape() const { return Shape(features.shape().begin() + 1, features.shape().end()); }

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    if (indices.empty()) fail(ErrorCategory::data, "empty dataset subset");
    const std::size_t stride = features.size() / size();
    Shape shape = features.shape();
    shape[0] = indices.size();
    Dataset d;
    d.features = Tensor(shape);
    d.classes = classes;
    for (std::size_t j = 0; j < indices.size(); ++j) {
        const std::size_t i = indices[j];
        if (i >= size()) fail(ErrorCategory::data, "sample index " + std::to_string(i) + " out of range");
        std::copy_n(features.data() + i * stride, stride, d.features.data() + j * stride);
        d.labels.push_back(labels[i]);
    }
    return d;
}

Tensor Dataset::label_tensor() const {
    Tensor t({size()});
    for (std::size_t i = 0; i < size(); ++i) t[i] = static_cast<double>(labels[i]);
    return t;
}

Dataset make_two_spirals(std::size_t n, double noise, std::uint64_t seed) {
    if (n < 2) fail(ErrorCategory::config, "two-spirals needs at least 2 samples");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> jitter(0.0, noise > 0 ? noise : 1.0);
    Dataset d;
    d.features = Tensor({n, 2});
    d.classes = 2;
    for (std::size_t i = 0; i < n; ++i) {
        // Radius grows with the angle; 1.75 turns per arm.
        const double t = std::sqrt(u(rng)) * 3.5 * std::numbers::pi;
        const double sign = i % 2 == 0 ? 1.0 : -1.0;
        double x = sign * t * std::cos(t) / (3.5 * std::numbers::pi);
        double y = sign * t * std::sin(t) / (3.5 * std::numbers::pi);
        if (noise > 0) {
            x += jitter(rng);
            y += jitter(rng);
        }
        d.features[2 * i] = x;
        d.features[2 * i + 1] = y;
        d.labels.push_back(i % 2);
    }
    return d;
}

Dataset make_blobs(std::size_t n, std::size_t classes, double noise, std::uint64_t seed) {
    if (classes < 2 || n < classes) fail(ErrorCategory::config, "blobs needs at least 2 classes and one sample per class");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> jitter(0.0, noise > 0 ? noise : 1.0);
    Dataset d;
    d.features = Tensor({n, 2});
    d.classes = classes;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % classes;
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
        d.features[2 * i] = std::cos(angle) + (noise > 0 ? jitter(rng) : 0.0);
        d.features[2 * i + 1] = std::sin(angle) + (noise > 0 ? jitter(rng) : 0.0);
        d.labels.push_back(c);
    }
    return d;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCategory::data, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct IdxFile {
    std::vector<std::size_t> dims;
    std::span<const std::uint8_t> data;
};

IdxFile parse_idx(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    auto error = [&](std::size_t offset, const std::string& msg) {
        fail(ErrorCategory::data, name + ": byte " + std::to_string(offset) + ": " + msg);
    };
    if (bytes.size() < 4) error(bytes.size(), "file too short for the IDX magic number");
    if (bytes[0] != 0 || bytes[1] != 0) error(0, "bad IDX magic (first two bytes must be zero)");
    if (bytes[2] != 0x08) error(2, "unsupported IDX element type 0x" + std::to_string(bytes[2]) + " (only ubyte 0x08)");
    const std::size_t rank = bytes[3];
    if (rank == 0) error(3, "IDX rank 0");
    if (bytes.size() < 4 + 4 * rank) error(bytes.size(), "truncated IDX header");
    IdxFile f;
    std::size_t total = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t at = 4 + 4 * i;
        const std::size_t d = (std::size_t{bytes[at]} << 24) | (std::size_t{bytes[at + 1]} << 16) |
                              (std::size_t{bytes[at + 2]} << 8) | bytes[at + 3];
        if (d == 0) error(at, "zero IDX dimension");
        f.dims.push_back(d);
        total *= d;
    }
    const std::size_t start = 4 + 4 * rank;
    if (bytes.size() - start != total)
        error(start, "expected " + std::to_string(total) + " data bytes, found " + std::to_string(bytes.size() - start));
    f.data = std::span(bytes).subspan(start);
    return f;
}

void check_labels(const Dataset& d, std::optional<std::size_t> classes, const std::string& where) {
    for (std::size_t i = 0; i < d.size(); ++i)
        if (classes && d.labels[i] >= *classes)
            fail(ErrorCategory::data, where + ": label " + std::to_string(d.labels[i]) + " of sample " +
                                          std::to_string(i) + " is outside 0.." + std::to_string(*classes - 1));
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> classes) {
    const auto ib = read_file(images), lb = read_file(labels);
    const IdxFile img = parse_idx(ib, images.string()), lab = parse_idx(lb, labels.string());
    if (lab.dims.size() != 1) fail(ErrorCategory::data, labels.string() + ": byte 3: label file must have rank 1");
    if (img.dims.size() < 2) fail(ErrorCategory::data, images.string() + ": byte 3: image file must have rank >= 2");
    if (img.dims[0] != lab.dims[0])
        fail(ErrorCategory::data, "image count " + std::to_string(img.dims[0]) + " != label count " +
                                      std::to_string(lab.dims[0]));
    Dataset d;
    Shape shape{img.dims[0], 1};
    shape.insert(shape.end(), img.dims.begin() + 1, img.dims.end());
    if (img.dims.size() == 2) shape = {img.dims[0], img.dims[1]};
    d.features = Tensor(shape);
    for (std::size_t i = 0; i < img.data.size(); ++i) d.features[i] = img.data[i] / 255.0;
    std::size_t max_label = 0;
    for (std::uint8_t v : lab.data) {
        d.labels.push_back(v);
        max_label = std::max<std::size_t>(max_label, v);
    }
    d.classes = classes.value_or(max_label + 1);
    check_labels(d, classes, labels.string());
    return d;
}

Dataset parse_csv(std::string_view text, std::optional<std::size_t> classes) {
    std::vector<double> values;
    std::vector<std::size_t> labels;
    std::size_t width = 0, line_no = 0, pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        const std::size_t line_start = pos;
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

        std::vector<double> row;
        std::vector<std::size_t> offsets;
        bool numeric = true;
        std::size_t field_start = 0;
        while (true) {
            std::size_t comma = line.find(',', field_start);
            std::string_view field = line.substr(field_start, comma == std::string_view::npos ? line.size() - field_start
                                                                                               : comma - field_start);
            std::size_t lead = field.find_first_not_of(" \t");
            const std::size_t field_offset = line_start + field_start + (lead == std::string_view::npos ? 0 : lead);
            field = lead == std::string_view::npos ? std::string_view{} : field.substr(lead);
            while (!field.empty() && (field.back() == ' ' || field.back() == '\t')) field.remove_suffix(1);
            double v = 0.0;
            const auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
            if (field.empty() || ec != std::errc{} || p != field.data() + field.size() || !std::isfinite(v)) {
                if (values.empty() && labels.empty() && line_no == 1) {
                    numeric = false;  // header
                    break;
                }
                fail(ErrorCategory::data, "csv byte " + std::to_string(field_offset) + " (line " +
                                              std::to_string(line_no) + "): cannot parse '" + std::string(field) +
                                              "' as a number");
            }
            row.push_back(v);
            offsets.push_back(field_offset);
            if (comma == std::string_view::npos) break;
            field_start = comma + 1;
        }
        if (!numeric) continue;
        if (row.size() < 2)
            fail(ErrorCategory::data, "csv byte " + std::to_string(line_start) + " (line " + std::to_string(line_no) +
                                          "): need at least one feature and a label");
        if (width == 0) width = row.size();
        if (row.size() != width)
            fail(ErrorCategory::data, "csv byte " + std::to_string(line_start) + " (line " + std::to_string(line_no) +
                                          "): " + std::to_string(row.size()) + " fields, expected " +
                                          std::to_string(width));
        const double label = row.back();
        if (label < 0 || label != std::floor(label) || label > 1e9)
            fail(ErrorCategory::data, "csv byte " + std::to_string(offsets.back()) + " (line " +
                                          std::to_string(line_no) + "): label must be a non-negative integer");
        const auto l = static_cast<std::size_t>(label);
        if (classes && l >= *classes)
            fail(ErrorCategory::data, "csv byte " + std::to_string(offsets.back()) + " (line " +
                                          std::to_string(line_no) + "): label " + std::to_string(l) +
                                          " is outside 0.." + std::to_string(*classes - 1));
        values.insert(values.end(), row.begin(), row.end() - 1);
        labels.push_back(l);
    }
    if (labels.empty()) fail(ErrorCategory::data, "csv contains no samples");
    Dataset d;
    d.features = Tensor({labels.size(), width - 1}, std::move(values));
    d.labels = std::move(labels);
    d.classes = classes.value_or(*std::max_element(d.labels.begin(), d.labels.end()) + 1);
    return d;
}

Dataset load_csv(const std::filesystem::path& path, std::optional<std::size_t> classes) {
    const auto bytes = read_file(path);
    return parse_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), classes);
}

DatasetSplit split_dataset(const Dataset& data, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) fail(ErrorCategory::config, "validation fraction must be in (0, 1)");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
    if (n_val == 0 || n_val >= data.size())
        fail(ErrorCategory::config, "validation fraction leaves an empty split for " + std::to_string(data.size()) +
                                        " samples");
    const std::span<const std::size_t> all(order);
    return {data.subset(all.subspan(n_val)), data.subset(all.first(n_val))};
}

void standardize(DatasetSplit& split) {
    Tensor& tr = split.train.features;
    const std::size_t n = split.train.size(), f = tr.size() / n;
    std::vector<double> mean(f, 0.0), sd(f, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) mean[j] += tr[i * f + j];
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) sd[j] += (tr[i * f + j] - mean[j]) * (tr[i * f + j] - mean[j]);
    for (double& s : sd) s = std::sqrt(s / static_cast<double>(n));
    for (Tensor* t : {&split.train.features, &split.validation.features}) {
        const std::size_t rows = t->size() / f;
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < f; ++j) {
                double& v = (*t)[i * f + j];
                v -= mean[j];
                if (sd[j] > 0) v /= sd[j];
            }
    }
}

DatasetSplit load_dataset(const DataSource& src) {
    Dataset d;
    switch (src.kind) {
        case DataSource::Kind::synthetic:
            if (src.generator == "two-spirals") {
                if (src.classes && *src.classes != 2) fail(ErrorCategory::config, "two-spirals has exactly 2 classes");
                d = make_two_spirals(src.samples, src.noise, src.seed);
            } else if (src.generator == "blobs") {
                d = make_blobs(src.samples, src.classes.value_or(2), src.noise, src.seed);
            } else {
                fail(ErrorCategory::config, "unknown synthetic generator '" + src.generator + "' (two-spirals, blobs)");
            }
            break;
        case DataSource::Kind::csv: d = load_csv(src.path, src.classes); break;
        case DataSource::Kind::idx: d = load_idx(src.images, src.labels, src.classes); break;
    }
    DatasetSplit split = split_dataset(d, src.validation_fraction, src.seed);
    if (src.normalize) standardize(split);
    return split;
}

}  // namespace lutq
