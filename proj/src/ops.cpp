#include "insight/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace insight {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

ConstMatrixMap view(const Tensor& t) {
    return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

MatrixMap view(Tensor& t) {
    return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

void require_same_size(const Tensor& a, const Tensor& b, const char* what) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(what) + ": " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

void zero_grads(const ParameterList& params) {
    for (Parameter* p : params) {
        p->zero_grad();
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul inner dimensions disagree: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    Tensor c = Tensor::matrix(a.rows(), b.cols());
    view(c).noalias() = view(a) * view(b);
    return c;
}

void gemm(const Tensor& a, bool transpose_a, const Tensor& b, bool transpose_b, Tensor& c,
          bool accumulate) {
    const std::size_t m = transpose_a ? a.cols() : a.rows();
    const std::size_t ka = transpose_a ? a.rows() : a.cols();
    const std::size_t kb = transpose_b ? b.cols() : b.rows();
    const std::size_t n = transpose_b ? b.rows() : b.cols();
    if (ka != kb || c.rows() != m || c.cols() != n) {
        throw ShapeError("gemm shape mismatch");
    }
    auto out = view(c);
    const auto lhs = view(a);
    const auto rhs = view(b);
    if (!accumulate) {
        out.setZero();
    }
    if (transpose_a && transpose_b) {
        out.noalias() += lhs.transpose() * rhs.transpose();
    } else if (transpose_a) {
        out.noalias() += lhs.transpose() * rhs;
    } else if (transpose_b) {
        out.noalias() += lhs * rhs.transpose();
    } else {
        out.noalias() += lhs * rhs;
    }
}

double gelu(double x) noexcept {
    const double inner = kGeluScale * (x + kGeluCubic * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_derivative(double x) noexcept {
    const double inner = kGeluScale * (x + kGeluCubic * x * x * x);
    const double t = std::tanh(inner);
    const double dinner = kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

Tensor gelu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) {
        v = gelu(v);
    }
    return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
    require_same_size(x, dy, "gelu_backward");
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        dx[i] *= gelu_derivative(x[i]);
    }
    return dx;
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) {
        v = v > 0.0 ? v : 0.0;
    }
    return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
    require_same_size(x, dy, "relu_backward");
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        if (!(x[i] > 0.0)) {
            dx[i] = 0.0;
        }
    }
    return dx;
}

Tensor tanh(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.values()) {
        v = std::tanh(v);
    }
    return y;
}

Tensor tanh_backward(const Tensor& y, const Tensor& dy) {
    require_same_size(y, dy, "tanh_backward");
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        dx[i] *= 1.0 - y[i] * y[i];
    }
    return dx;
}

void softmax_prefix(std::span<double> row, std::size_t valid) {
    double max_v = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < valid; ++j) {
        max_v = std::max(max_v, row[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < valid; ++j) {
        row[j] = std::exp(row[j] - max_v);
        sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < valid; ++j) {
        row[j] *= inv;
    }
    for (std::size_t j = valid; j < row.size(); ++j) {
        row[j] = 0.0;
    }
}

// ---------------------------------------------------------------------------

Linear::Linear(std::string name, std::size_t in, std::size_t out)
    : weight(name + ".weight", Tensor::matrix(in, out)),
      bias(name + ".bias", Tensor({out})) {}

void Linear::init_normal(std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : weight.value.values()) {
        v = dist(rng);
    }
    bias.value.fill(0.0);
}

Tensor Linear::forward(const Tensor& x) const {
    if (x.cols() != in_features()) {
        throw ShapeError("linear " + weight.name + ": input " + shape_string(x.shape()) +
                         " vs weight " + shape_string(weight.value.shape()));
    }
    Tensor y = Tensor::matrix(x.rows(), out_features());
    auto out = view(y);
    out.noalias() = view(x) * view(weight.value);
    const Eigen::Map<const Eigen::RowVectorXd> b(bias.value.data(),
                                                 static_cast<Eigen::Index>(bias.value.size()));
    out.rowwise() += b;
    return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& dy) {
    gemm(x, true, dy, false, weight.grad, true);
    Eigen::Map<Eigen::RowVectorXd> db(bias.grad.data(),
                                      static_cast<Eigen::Index>(bias.grad.size()));
    db += view(dy).colwise().sum();
    Tensor dx = Tensor::matrix(x.rows(), in_features());
    gemm(dy, false, weight.value, true, dx, false);
    return dx;
}

// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(std::string name, std::size_t dim, double eps)
    : gain(name + ".gain", Tensor({dim}, 1.0)), bias(name + ".bias", Tensor({dim})),
      epsilon(eps) {}

Tensor LayerNorm::forward(const Tensor& x, LayerNormCache* cache) const {
    const std::size_t d = gain.value.size();
    if (x.cols() != d) {
        throw ShapeError("layer_norm " + gain.name + ": last dimension " +
                         std::to_string(x.cols()) + " != " + std::to_string(d));
    }
    const std::size_t rows = x.rows();
    Tensor y(x.shape());
    if (cache) {
        cache->normalized = Tensor(x.shape());
        cache->inv_stddev.assign(rows, 0.0);
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const auto in = x.row(r);
        double mean = 0.0;
        for (double v : in) {
            mean += v;
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : in) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + epsilon);
        auto out = y.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            const double xhat = (in[c] - mean) * rstd;
            out[c] = xhat * gain.value[c] + bias.value[c];
            if (cache) {
                cache->normalized(r, c) = xhat;
            }
        }
        if (cache) {
            cache->inv_stddev[r] = rstd;
        }
    }
    return y;
}

Tensor LayerNorm::backward(const LayerNormCache& cache, const Tensor& dy) {
    const std::size_t d = gain.value.size();
    const std::size_t rows = dy.rows();
    Tensor dx(dy.shape());
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto g = dy.row(r);
        const auto xhat = cache.normalized.row(r);
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            gain.grad[c] += g[c] * xhat[c];
            bias.grad[c] += g[c];
            dxhat[c] = g[c] * gain.value[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        auto out = dx.row(r);
        const double rstd = cache.inv_stddev[r];
        for (std::size_t c = 0; c < d; ++c) {
            out[c] = rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------

CausalSelfAttention::CausalSelfAttention(std::string name, std::size_t dim, std::size_t heads)
    : qkv(name + ".qkv", dim, 3 * dim), proj(name + ".proj", dim, dim), dim_(dim), heads_(heads) {
    if (heads == 0 || dim % heads != 0) {
        throw std::invalid_argument("attention dimension " + std::to_string(dim) +
                                    " is not divisible by " + std::to_string(heads) + " heads");
    }
}

void CausalSelfAttention::init_normal(std::mt19937_64& rng, double stddev) {
    qkv.init_normal(rng, stddev);
    proj.init_normal(rng, stddev);
}

Tensor CausalSelfAttention::forward(const Tensor& x, std::size_t seq_len,
                                    AttentionCache* cache) const {
    const std::size_t d = dim_;
    const std::size_t dh = d / heads_;
    const std::size_t rows = x.rows();
    if (seq_len == 0 || rows % seq_len != 0) {
        throw ShapeError("attention rows " + std::to_string(rows) +
                         " not a multiple of sequence length " + std::to_string(seq_len));
    }
    const std::size_t batch = rows / seq_len;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor qkv_out = qkv.forward(x);
    Tensor probs = Tensor::matrix(batch * heads_ * seq_len, seq_len);
    Tensor context = Tensor::matrix(rows, d);
    const std::size_t stride = 3 * d;

    for (std::size_t b = 0; b < batch; ++b) {
        const double* base = qkv_out.data() + b * seq_len * stride;
        for (std::size_t h = 0; h < heads_; ++h) {
            const std::size_t qo = h * dh;
            const std::size_t ko = d + h * dh;
            const std::size_t vo = 2 * d + h * dh;
            for (std::size_t t = 0; t < seq_len; ++t) {
                auto p = probs.row((b * heads_ + h) * seq_len + t);
                const double* q = base + t * stride + qo;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* k = base + s * stride + ko;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < dh; ++i) {
                        dot += q[i] * k[i];
                    }
                    p[s] = dot * scale;
                }
                softmax_prefix(p, t + 1);
                double* ctx = context.data() + (b * seq_len + t) * d + h * dh;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double w = p[s];
                    const double* v = base + s * stride + vo;
                    for (std::size_t i = 0; i < dh; ++i) {
                        ctx[i] += w * v[i];
                    }
                }
            }
        }
    }

    Tensor y = proj.forward(context);
    if (cache) {
        cache->input = x;
        cache->qkv = std::move(qkv_out);
        cache->probs = std::move(probs);
        cache->context = std::move(context);
    }
    return y;
}

Tensor CausalSelfAttention::backward(const AttentionCache& cache, std::size_t seq_len,
                                     const Tensor& dy) {
    const std::size_t d = dim_;
    const std::size_t dh = d / heads_;
    const std::size_t rows = dy.rows();
    const std::size_t batch = rows / seq_len;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t stride = 3 * d;

    Tensor dcontext = proj.backward(cache.context, dy);
    Tensor dqkv = Tensor::matrix(rows, stride);
    std::vector<double> dp(seq_len);

    for (std::size_t b = 0; b < batch; ++b) {
        const double* base = cache.qkv.data() + b * seq_len * stride;
        double* dbase = dqkv.data() + b * seq_len * stride;
        for (std::size_t h = 0; h < heads_; ++h) {
            const std::size_t qo = h * dh;
            const std::size_t ko = d + h * dh;
            const std::size_t vo = 2 * d + h * dh;
            for (std::size_t t = 0; t < seq_len; ++t) {
                const auto p = cache.probs.row((b * heads_ + h) * seq_len + t);
                const double* dctx = dcontext.data() + (b * seq_len + t) * d + h * dh;
                // dP = dctx . v_s ; dV_s += p_s * dctx
                double weighted = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* v = base + s * stride + vo;
                    double* dv = dbase + s * stride + vo;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < dh; ++i) {
                        acc += dctx[i] * v[i];
                        dv[i] += p[s] * dctx[i];
                    }
                    dp[s] = acc;
                    weighted += acc * p[s];
                }
                const double* q = base + t * stride + qo;
                double* dq = dbase + t * stride + qo;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double dscore = p[s] * (dp[s] - weighted) * scale;
                    const double* k = base + s * stride + ko;
                    double* dk = dbase + s * stride + ko;
                    for (std::size_t i = 0; i < dh; ++i) {
                        dq[i] += dscore * k[i];
                        dk[i] += dscore * q[i];
                    }
                }
            }
        }
    }
    return qkv.backward(cache.input, dqkv);
}

}  // namespace insight
