#include "lutq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "lutq/errors.hpp"

namespace lutq {

std::size_t shape_size(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (auto extent : shape_)
        if (extent == 0) fail(ErrorCategory::shape, "tensor extents must be positive, got " + shape_to_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    for (auto extent : shape_)
        if (extent == 0) fail(ErrorCategory::shape, "tensor extents must be positive, got " + shape_to_string(shape_));
    if (shape_size(shape_) != data_.size())
        fail(ErrorCategory::shape, "shape " + shape_to_string(shape_) + " does not hold " +
                                       std::to_string(data_.size()) + " values");
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size())
        fail(ErrorCategory::shape, "axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape_));
    return shape_[axis];
}

double Tensor::item() const {
    if (data_.size() != 1) fail(ErrorCategory::shape, "item() on tensor of shape " + shape_to_string(shape_));
    return data_[0];
}

Tensor Tensor::reshape(Shape shape) const {
    if (shape_size(shape) != data_.size())
        fail(ErrorCategory::shape, "cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, std::string_view where) {
    if (!t.all_finite()) fail(ErrorCategory::numeric, "non-finite value produced at " + std::string(where));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size())
        fail(ErrorCategory::shape, "size mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace lutq
