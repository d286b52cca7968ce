#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "insight/tensor.hpp"

namespace insight {

/// A learned tensor together with its accumulated gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string name, Tensor value);

    void zero_grad() { grad.fill(0.0); }
};

using ParameterList = std::vector<Parameter*>;

void zero_grads(const ParameterList& params);

// ---------------------------------------------------------------------------
// Dense kernels. Tensors are viewed as rows() x cols() matrices.
// ---------------------------------------------------------------------------

/// Standard matrix product a[m x k] * b[k x n].
[[nodiscard]] Tensor matmul(const Tensor& a, const Tensor& b);

/// c (+)= op(a) * op(b) where op optionally transposes.
void gemm(const Tensor& a, bool transpose_a, const Tensor& b, bool transpose_b, Tensor& c,
          bool accumulate);

/// tanh-approximation GeLU.
[[nodiscard]] double gelu(double x) noexcept;
[[nodiscard]] double gelu_derivative(double x) noexcept;
[[nodiscard]] Tensor gelu(const Tensor& x);
[[nodiscard]] Tensor gelu_backward(const Tensor& x, const Tensor& dy);

[[nodiscard]] Tensor relu(const Tensor& x);
[[nodiscard]] Tensor relu_backward(const Tensor& x, const Tensor& dy);

[[nodiscard]] Tensor tanh(const Tensor& x);
/// Backward through tanh given its output y.
[[nodiscard]] Tensor tanh_backward(const Tensor& y, const Tensor& dy);

/// Row-wise softmax over the first `valid` entries of `row`; the remainder is zeroed.
void softmax_prefix(std::span<double> row, std::size_t valid);

// ---------------------------------------------------------------------------
// Layers with manual adjoints. Forward passes are const and never mutate the
// layer; backward passes accumulate into the parameter gradients.
// ---------------------------------------------------------------------------

class Linear {
public:
    Linear() = default;
    Linear(std::string name, std::size_t in, std::size_t out);

    void init_normal(std::mt19937_64& rng, double stddev);

    [[nodiscard]] Tensor forward(const Tensor& x) const;
    /// Returns dx; adds dW = x^T dy and db = colsum(dy).
    Tensor backward(const Tensor& x, const Tensor& dy);

    [[nodiscard]] std::size_t in_features() const { return weight.value.shape()[0]; }
    [[nodiscard]] std::size_t out_features() const { return weight.value.shape()[1]; }

    void collect(ParameterList& out) { out.push_back(&weight); out.push_back(&bias); }

    Parameter weight;  // [in x out]
    Parameter bias;    // [out]
};

struct LayerNormCache {
    Tensor normalized;               // (x - mean) * rstd
    std::vector<double> inv_stddev;  // one per row
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(std::string name, std::size_t dim, double epsilon = 1e-5);

    [[nodiscard]] Tensor forward(const Tensor& x, LayerNormCache* cache = nullptr) const;
    Tensor backward(const LayerNormCache& cache, const Tensor& dy);

    void collect(ParameterList& out) { out.push_back(&gain); out.push_back(&bias); }

    Parameter gain;
    Parameter bias;
    double epsilon = 1e-5;
};

struct AttentionCache {
    Tensor input;
    Tensor qkv;       // [rows x 3d]
    Tensor probs;     // [batch*heads*T x T], zero above the diagonal
    Tensor context;   // [rows x d], heads concatenated
};

/// Multi-head self-attention where position j only sees positions <= j.
///
/// Inputs are a stack of `rows / seq_len` independent sequences of length
/// `seq_len`, each row a d-dimensional token.
class CausalSelfAttention {
public:
    CausalSelfAttention() = default;
    CausalSelfAttention(std::string name, std::size_t dim, std::size_t heads);

    void init_normal(std::mt19937_64& rng, double stddev);

    [[nodiscard]] Tensor forward(const Tensor& x, std::size_t seq_len,
                                 AttentionCache* cache = nullptr) const;
    Tensor backward(const AttentionCache& cache, std::size_t seq_len, const Tensor& dy);

    [[nodiscard]] std::size_t heads() const { return heads_; }
    [[nodiscard]] std::size_t dim() const { return dim_; }

    void collect(ParameterList& out) { qkv.collect(out); proj.collect(out); }

    Linear qkv;   // d -> 3d, columns ordered [Q | K | V], head h owns slice h*dh..(h+1)*dh
    Linear proj;  // d -> d

private:
    std::size_t dim_ = 0;
    std::size_t heads_ = 1;
};

}  // namespace insight
