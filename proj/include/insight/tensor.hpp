#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace insight {

/// Raised when a NaN or infinity shows up where finite values are required.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised on incompatible tensor dimensions.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

/// Cache-line aligned storage. Vectorized kernels choose their loop peeling
/// from the data address, so a fixed alignment keeps results reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlignment{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Dense row-major float64 tensor with value semantics.
///
/// Most kernels treat a tensor as a matrix whose column count is the last
/// dimension and whose row count is the product of the leading dimensions.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    static Tensor vector(std::vector<double> values);
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor identity(std::size_t n);

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
    [[nodiscard]] bool empty() const noexcept { return values_.empty(); }

    /// Last dimension (1 for a scalar).
    [[nodiscard]] std::size_t cols() const noexcept;
    /// Product of all leading dimensions.
    [[nodiscard]] std::size_t rows() const noexcept;

    [[nodiscard]] double* data() noexcept { return values_.data(); }
    [[nodiscard]] const double* data() const noexcept { return values_.data(); }
    [[nodiscard]] std::span<double> values() noexcept { return values_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

    [[nodiscard]] std::span<double> row(std::size_t r);
    [[nodiscard]] std::span<const double> row(std::size_t r) const;

    void fill(double v);
    void reshape(Shape shape);

    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double s);

    [[nodiscard]] bool all_finite() const noexcept;
    /// Throws NumericError naming `what` if any entry is NaN or infinite.
    void require_finite(std::string_view what) const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double, AlignedAllocator<double>> values_;
};

[[nodiscard]] std::size_t shape_product(const Shape& shape) noexcept;
[[nodiscard]] std::string shape_string(const Shape& shape);

}  // namespace insight
