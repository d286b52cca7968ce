#include "insight/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace insight {

std::size_t shape_product(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(values.begin(), values.end()) {
    if (shape_product(shape_) != values_.size()) {
        throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(values_.size()) + " values");
    }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
    return Tensor({rows, cols}, fill);
}

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("ragged rows in Tensor::from_rows");
        }
        v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(v));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        t(i, i) = 1.0;
    }
    return t;
}

std::size_t Tensor::cols() const noexcept {
    return shape_.empty() ? 1 : shape_.back();
}

std::size_t Tensor::rows() const noexcept {
    const std::size_t c = cols();
    return c == 0 ? 0 : values_.size() / c;
}

std::span<double> Tensor::row(std::size_t r) {
    return std::span<double>(values_).subspan(r * cols(), cols());
}

std::span<const double> Tensor::row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
}

void Tensor::fill(double v) {
    std::fill(values_.begin(), values_.end(), v);
}

void Tensor::reshape(Shape shape) {
    if (shape_product(shape) != values_.size()) {
        throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
}

Tensor& Tensor::operator+=(const Tensor& other) {
    if (other.size() != size()) {
        throw ShapeError("tensor += size mismatch " + shape_string(shape_) + " vs " +
                         shape_string(other.shape_));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
        values_[i] += other.values_[i];
    }
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (double& v : values_) {
        v *= s;
    }
    return *this;
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::require_finite(std::string_view what) const {
    if (!all_finite()) {
        throw NumericError("non-finite values in " + std::string(what));
    }
}

}  // namespace insight
