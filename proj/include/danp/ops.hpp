#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "danp/autodiff.hpp"

namespace danp {

/// Boolean attention pattern: allowed(i, j) means query i may read key j.
class AttentionMask {
  public:
    AttentionMask() = default;
    AttentionMask(std::size_t rows, std::size_t cols, bool fill = false)
        : rows_(rows), cols_(cols), allowed_(rows * cols, fill ? 1 : 0) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool operator()(std::size_t i, std::size_t j) const { return allowed_[i * cols_ + j] != 0; }
    void set(std::size_t i, std::size_t j, bool on) { allowed_[i * cols_ + j] = on ? 1 : 0; }

    template <typename T>
    Tensor<T> to_tensor() const {
        Tensor<T> t({rows_, cols_});
        for (std::size_t i = 0; i < allowed_.size(); ++i) t[i] = allowed_[i] ? T{1} : T{0};
        return t;
    }

    /// Entries must be exactly 0 or 1.
    template <typename T>
    static AttentionMask from_tensor(const Tensor<T>& t) {
        AttentionMask m(t.rows(), t.cols());
        for (std::size_t i = 0; i < t.numel(); ++i) {
            if (t[i] != T{0} && t[i] != T{1}) throw ContractError("attention mask entries must be 0 or 1");
            m.allowed_[i] = t[i] == T{1} ? 1 : 0;
        }
        return m;
    }

    friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> allowed_;
};

/// Additive bias applied to disallowed attention scores.
inline constexpr double kMaskedScore = -1e9;

namespace ops {

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
/// a[m x n] + bias[n] broadcast over rows.
template <typename T> Var<T> add_row(Var<T> a, Var<T> bias);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> add_scalar(Var<T> a, T offset);

template <typename T> Var<T> relu(Var<T> a);
/// Exact (erf) GELU.
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> softplus(Var<T> a);
template <typename T> Var<T> square(Var<T> a);

template <typename T> Var<T> softmax_rows(Var<T> x);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));

template <typename T> Var<T> concat_cols(Var<T> a, Var<T> b);
template <typename T> Var<T> concat_rows(Var<T> a, Var<T> b);
/// Rows may repeat; the backward pass scatter-adds.
template <typename T> Var<T> gather_rows(Var<T> x, std::vector<std::size_t> index);
/// Mean of consecutive row groups: [g*size x d] -> [g x d].
template <typename T> Var<T> segment_mean_rows(Var<T> x, std::size_t group);
template <typename T> Var<T> mean_rows(Var<T> x);
template <typename T> Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t count);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);

/// Scaled dot-product attention over already-projected q, k, v with
/// `heads` column slices. Masked scores get kMaskedScore before softmax;
/// a query row with no allowed key is rejected as an isolated query.
/// Key columns that no query may read are skipped entirely.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const AttentionMask* mask = nullptr);

/// Block-diagonal attention: query rows [g*q_group, (g+1)*q_group) read
/// only key rows [g*k_group, (g+1)*k_group).
template <typename T>
Var<T> grouped_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::size_t q_group,
                         std::size_t k_group);

/// Sum over elements of log N(y | mu, sigma^2); y is data, not differentiated.
template <typename T> Var<T> gaussian_loglik_sum(Var<T> mu, Var<T> sigma, const Tensor<T>& y);

/// KL(N(m1, diag v1) || N(m2, diag v2)) summed over dimensions.
template <typename T> Var<T> kl_diag(Var<T> m1, Var<T> v1, Var<T> m2, Var<T> v2);

}  // namespace ops
}  // namespace danp
