#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lutq/tensor.hpp"

namespace lutq {

struct Dataset {
    Tensor features;  // [n, sample...]
    std::vector<std::size_t> labels;
    std::size_t classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    Shape sample_shape() const;
    Dataset subset(std::span<const std::size_t> indices) const;
    /// Labels as a [n] tensor, the target format of the cross-entropy loss.
    Tensor label_tensor() const;
};

struct DatasetSplit {
    Dataset train;
    Dataset validation;
};

/// Two interleaved spirals in the unit square region, classes alternate by sample index.
Dataset make_two_spirals(std::size_t n, double noise, std::uint64_t seed);
/// Gaussian blobs with centers on the unit circle.
Dataset make_blobs(std::size_t n, std::size_t classes, double noise, std::uint64_t seed);

/// IDX (ubyte) image/label pair; pixels scaled to [0, 1], shape [n, 1, rows, cols].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> classes = std::nullopt);
/// Rows of features followed by an integer label; a non-numeric first row is a header.
Dataset load_csv(const std::filesystem::path& path, std::optional<std::size_t> classes = std::nullopt);
Dataset parse_csv(std::string_view text, std::optional<std::size_t> classes = std::nullopt);

struct DataSource {
    enum class Kind { synthetic, csv, idx };
    Kind kind = Kind::synthetic;
    std::string generator = "two-spirals";  // two-spirals | blobs
    std::size_t samples = 1000;
    double noise = 0.0;
    std::optional<std::size_t> classes;
    std::filesystem::path path;    // csv
    std::filesystem::path images;  // idx
    std::filesystem::path labels;  // idx
    double validation_fraction = 0.2;
    bool normalize = true;
    std::uint64_t seed = 0;
};

/// Seeded shuffle, then the first (1 - fraction) share is training data.
DatasetSplit split_dataset(const Dataset& data, double validation_fraction, std::uint64_t seed);
/// Per-feature z-score with training statistics (constant features are only centered).
void standardize(DatasetSplit& split);

DatasetSplit load_dataset(const DataSource& source);

}  // namespace lutq
