#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "insight/tensor.hpp"

namespace insight::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, scale);
    for (double& v : t.values()) {
        v = dist(rng);
    }
    return t;
}

/// Element-wise triple loop, used as the independent product oracle.
inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c = Tensor::matrix(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                acc += a(i, k) * b(k, j);
            }
            c(i, j) = acc;
        }
    }
    return c;
}

/// Central-difference gradient of a scalar function of `x`.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, Tensor x,
                               double eps = 1e-6) {
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double plus = f(x);
        x[i] = orig - eps;
        const double minus = f(x);
        x[i] = orig;
        g[i] = (plus - minus) / (2.0 * eps);
    }
    return g;
}

inline double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

/// Sum of w .* y, a random linear functional that turns a tensor-valued map
/// into a scalar for finite-difference checks.
inline double weighted_sum(const Tensor& y, const Tensor& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        s += y[i] * w[i];
    }
    return s;
}

}  // namespace insight::test
