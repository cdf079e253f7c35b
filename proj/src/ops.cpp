#include "danp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

namespace danp::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapMat<T> as_mat(const Tensor<T>& t) {
    return CMapMat<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MapMat<T> as_mat(std::vector<T>& v, std::size_t rows, std::size_t cols) {
    return MapMat<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same(const char* op, const Shape& a, const Shape& b) {
    if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
Tensor<T> like(const Tensor<T>& t) {
    return Tensor<T>(t.shape());
}

/// Elementwise unary op with derivative expressed through input x and output y.
template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, F f, D dfdx) {
    const Tensor<T>& x = a.value();
    Tensor<T> y = like(x);
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
    std::size_t ia = a.id;
    return a.tape->record(std::move(y), {ia}, [ia, dfdx](Tape<T>& tape, std::size_t self) {
        if (!tape.needs_grad(ia)) return;
        const auto& g = tape.grad(self);
        const auto& xv = tape.value(ia);
        const auto& yv = tape.value(self);
        auto& ga = tape.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i], yv[i]);
    });
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (bv.rows() != k)
        throw DimensionError("matmul: inner extents differ for " + shape_str(av.shape()) + " x " +
                             shape_str(bv.shape()));
    Tensor<T> out({m, n});
    as_mat(out.storage(), m, n).noalias() = as_mat(av) * as_mat(bv);
    std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<T>& tape, std::size_t self) {
        auto g = as_mat(tape.grad(self), m, n);
        if (tape.needs_grad(ia)) as_mat(tape.grad(ia), m, k).noalias() += g * as_mat(tape.value(ib)).transpose();
        if (tape.needs_grad(ib)) as_mat(tape.grad(ib), k, n).noalias() += as_mat(tape.value(ia)).transpose() * g;
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    const Tensor<T>& av = a.value();
    const std::size_t m = av.rows(), n = av.cols();
    Tensor<T> out({n, m});
    as_mat(out.storage(), n, m) = as_mat(av).transpose();
    std::size_t ia = a.id;
    return a.tape->record(std::move(out), {ia}, [ia, m, n](Tape<T>& tape, std::size_t self) {
        if (tape.needs_grad(ia)) as_mat(tape.grad(ia), m, n) += as_mat(tape.grad(self), n, m).transpose();
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same("add", a.shape(), b.shape());
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    out.set_requires_grad(false);
    std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        for (auto id : {ia, ib}) {
            if (!tape.needs_grad(id)) continue;
            auto& gi = tape.grad(id);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same("sub", a.shape(), b.shape());
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    out.set_requires_grad(false);
    std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        if (tape.needs_grad(ia)) {
            auto& ga = tape.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tape.needs_grad(ib)) {
            auto& gb = tape.grad(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same("mul", a.shape(), b.shape());
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    out.set_requires_grad(false);
    std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        if (tape.needs_grad(ia)) {
            auto& ga = tape.grad(ia);
            const auto& bv = tape.value(ib);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (tape.needs_grad(ib)) {
            auto& gb = tape.grad(ib);
            const auto& av = tape.value(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias) {
    const auto& av = a.value();
    const auto& bv = bias.value();
    const std::size_t m = av.rows(), n = av.cols();
    if (bv.numel() != n)
        throw DimensionError("add_row: bias " + shape_str(bv.shape()) + " does not match columns of " +
                             shape_str(av.shape()));
    Tensor<T> out = av;
    out.set_requires_grad(false);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
    std::size_t ia = a.id, ib = bias.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib, m, n](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        if (tape.needs_grad(ia)) {
            auto& ga = tape.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tape.needs_grad(ib)) {
            auto& gb = tape.grad(ib);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
    return unary(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
    return unary(a, [offset](T x) { return x + offset; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> relu(Var<T> a) {
    return unary(a, [](T x) { return x > T{0} || x != x ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> gelu(Var<T> a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    return unary(
        a, [](T x) { return T(0.5) * x * (T{1} + std::erf(x * inv_sqrt2)); },
        [](T x, T) { return T(0.5) * (T{1} + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x); });
}

template <typename T>
Var<T> exp(Var<T> a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
    return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Var<T> softplus(Var<T> a) {
    return unary(
        a, [](T x) { return x > T(20) ? x : std::log1p(std::exp(x)); },
        [](T x, T) { return T{1} / (T{1} + std::exp(-x)); });
}

template <typename T>
Var<T> square(Var<T> a) {
    return unary(a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor<T> out = like(xv);
    for (std::size_t r = 0; r < m; ++r) {
        const T* in = xv.data().data() + r * n;
        T* o = out.data().data() + r * n;
        T mx = *std::max_element(in, in + n);
        T total{0};
        for (std::size_t c = 0; c < n; ++c) total += (o[c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < n; ++c) o[c] /= total;
    }
    std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix}, [ix, m, n](Tape<T>& tape, std::size_t self) {
        if (!tape.needs_grad(ix)) return;
        const auto& g = tape.grad(self);
        const auto& p = tape.value(self);
        auto& gx = tape.grad(ix);
        for (std::size_t r = 0; r < m; ++r) {
            T dot{0};
            for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * p[r * n + c];
            for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += p[r * n + c] * (g[r * n + c] - dot);
        }
    });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), d = xv.cols();
    if (gain.value().numel() != d || bias.value().numel() != d)
        throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " entries, got " +
                             shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    auto xhat = std::make_shared<std::vector<T>>(xv.numel());
    auto inv_std = std::make_shared<std::vector<T>>(m);
    Tensor<T> out = like(xv);
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    for (std::size_t r = 0; r < m; ++r) {
        const T* row = xv.data().data() + r * d;
        T mu{0};
        for (std::size_t c = 0; c < d; ++c) mu += row[c];
        mu /= T(d);
        T var{0};
        for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= T(d);
        T is = T{1} / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < d; ++c) {
            T h = (row[c] - mu) * is;
            (*xhat)[r * d + c] = h;
            out[r * d + c] = h * gv[c] + bv[c];
        }
    }
    std::size_t ix = x.id, ig = gain.id, ib = bias.id;
    return x.tape->record(std::move(out), {ix, ig, ib},
                          [ix, ig, ib, m, d, xhat, inv_std](Tape<T>& tape, std::size_t self) {
                              const auto& g = tape.grad(self);
                              if (tape.needs_grad(ig)) {
                                  auto& gg = tape.grad(ig);
                                  for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * (*xhat)[i];
                              }
                              if (tape.needs_grad(ib)) {
                                  auto& gb = tape.grad(ib);
                                  for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                              }
                              if (!tape.needs_grad(ix)) return;
                              const auto& gv = tape.value(ig);
                              auto& gx = tape.grad(ix);
                              for (std::size_t r = 0; r < m; ++r) {
                                  T mean_dh{0}, mean_dh_h{0};
                                  for (std::size_t c = 0; c < d; ++c) {
                                      T dh = g[r * d + c] * gv[c];
                                      mean_dh += dh;
                                      mean_dh_h += dh * (*xhat)[r * d + c];
                                  }
                                  mean_dh /= T(d);
                                  mean_dh_h /= T(d);
                                  for (std::size_t c = 0; c < d; ++c) {
                                      T dh = g[r * d + c] * gv[c];
                                      gx[r * d + c] +=
                                          (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * d + c] * mean_dh_h);
                                  }
                              }
                          });
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    const std::size_t m = av.rows(), p = av.cols(), q = bv.cols();
    if (bv.rows() != m)
        throw DimensionError("concat_cols: row counts differ " + shape_str(av.shape()) + " vs " +
                             shape_str(bv.shape()));
    Tensor<T> out({m, p + q});
    for (std::size_t r = 0; r < m; ++r) {
        std::copy_n(av.data().data() + r * p, p, out.data().data() + r * (p + q));
        std::copy_n(bv.data().data() + r * q, q, out.data().data() + r * (p + q) + p);
    }
    std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib, m, p, q](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        if (tape.needs_grad(ia)) {
            auto& ga = tape.grad(ia);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < p; ++c) ga[r * p + c] += g[r * (p + q) + c];
        }
        if (tape.needs_grad(ib)) {
            auto& gb = tape.grad(ib);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < q; ++c) gb[r * q + c] += g[r * (p + q) + p + c];
        }
    });
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    const std::size_t d = av.cols();
    if (bv.cols() != d)
        throw DimensionError("concat_rows: column counts differ " + shape_str(av.shape()) + " vs " +
                             shape_str(bv.shape()));
    const std::size_t na = av.numel();
    std::vector<T> data(av.data().begin(), av.data().end());
    data.insert(data.end(), bv.data().begin(), bv.data().end());
    Tensor<T> out({av.rows() + bv.rows(), d}, std::move(data));
    std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {ia, ib}, [ia, ib, na](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        if (tape.needs_grad(ia)) {
            auto& ga = tape.grad(ia);
            for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (tape.needs_grad(ib)) {
            auto& gb = tape.grad(ib);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
        }
    });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> index) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), d = xv.cols();
    if (index.empty()) throw DimensionError("gather_rows: empty index");
    Tensor<T> out({index.size(), d});
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= m)
            throw DimensionError("gather_rows: row " + std::to_string(index[r]) + " out of range for " +
                                 shape_str(xv.shape()));
        std::copy_n(xv.data().data() + index[r] * d, d, out.data().data() + r * d);
    }
    std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix},
                          [ix, d, index = std::move(index)](Tape<T>& tape, std::size_t self) {
                              if (!tape.needs_grad(ix)) return;
                              const auto& g = tape.grad(self);
                              auto& gx = tape.grad(ix);
                              for (std::size_t r = 0; r < index.size(); ++r)
                                  for (std::size_t c = 0; c < d; ++c) gx[index[r] * d + c] += g[r * d + c];
                          });
}

template <typename T>
Var<T> segment_mean_rows(Var<T> x, std::size_t group) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), d = xv.cols();
    if (group == 0 || m % group != 0)
        throw DimensionError("segment_mean_rows: " + std::to_string(m) + " rows not divisible into groups of " +
                             std::to_string(group));
    const std::size_t g_count = m / group;
    const T inv = T{1} / T(group);
    Tensor<T> out({g_count, d});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < d; ++c) out[(r / group) * d + c] += xv[r * d + c] * inv;
    std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix}, [ix, m, d, group, inv](Tape<T>& tape, std::size_t self) {
        if (!tape.needs_grad(ix)) return;
        const auto& g = tape.grad(self);
        auto& gx = tape.grad(ix);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[(r / group) * d + c] * inv;
    });
}

template <typename T>
Var<T> mean_rows(Var<T> x) {
    return segment_mean_rows(x, x.rows());
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t count) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), d = xv.cols();
    if (count == 0 || start + count > d)
        throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of range for " + shape_str(xv.shape()));
    Tensor<T> out({m, count});
    for (std::size_t r = 0; r < m; ++r) std::copy_n(xv.data().data() + r * d + start, count, out.data().data() + r * count);
    std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix}, [ix, m, d, start, count](Tape<T>& tape, std::size_t self) {
        if (!tape.needs_grad(ix)) return;
        const auto& g = tape.grad(self);
        auto& gx = tape.grad(ix);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < count; ++c) gx[r * d + start + c] += g[r * count + c];
    });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    out.set_requires_grad(false);
    std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix}, [ix](Tape<T>& tape, std::size_t self) {
        if (!tape.needs_grad(ix)) return;
        const auto& g = tape.grad(self);
        auto& gx = tape.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

template <typename T>
Var<T> sum(Var<T> x) {
    const auto& xv = x.value();
    T total{0};
    for (T v : xv.data()) total += v;
    std::size_t ix = x.id;
    return x.tape->record(Tensor<T>({1}, {total}), {ix}, [ix](Tape<T>& tape, std::size_t self) {
        if (!tape.needs_grad(ix)) return;
        T g = tape.grad(self)[0];
        for (auto& v : tape.grad(ix)) v += g;
    });
}

template <typename T>
Var<T> mean(Var<T> x) {
    return scale(sum(x), T{1} / T(x.value().numel()));
}

namespace {

struct AttnBlock {
    std::size_t q_begin = 0;
    std::size_t q_count = 0;
    std::vector<std::size_t> keys;
};

template <typename T>
Var<T> attention_blocks(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::vector<AttnBlock> blocks,
                        std::shared_ptr<const AttentionMask> mask) {
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    const std::size_t d = qv.cols();
    const std::size_t dh = d / heads;
    const T scale_factor = T{1} / std::sqrt(T(dh));

    auto probs = std::make_shared<std::vector<RowMat<T>>>();
    probs->reserve(blocks.size() * heads);
    Tensor<T> out({qv.rows(), d});

    for (const auto& blk : blocks) {
        const auto nq = static_cast<Eigen::Index>(blk.q_count);
        const auto nk = static_cast<Eigen::Index>(blk.keys.size());
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            RowMat<T> qb(nq, dh), kb(nk, dh), vb(nk, dh);
            for (Eigen::Index i = 0; i < nq; ++i)
                for (std::size_t c = 0; c < dh; ++c) qb(i, c) = qv[(blk.q_begin + i) * d + off + c];
            for (Eigen::Index j = 0; j < nk; ++j)
                for (std::size_t c = 0; c < dh; ++c) {
                    kb(j, c) = kv[blk.keys[j] * d + off + c];
                    vb(j, c) = vv[blk.keys[j] * d + off + c];
                }
            RowMat<T> s = (qb * kb.transpose()) * scale_factor;
            if (mask) {
                for (Eigen::Index i = 0; i < nq; ++i)
                    for (Eigen::Index j = 0; j < nk; ++j)
                        if (!(*mask)(blk.q_begin + i, blk.keys[j])) s(i, j) += T(kMaskedScore);
            }
            for (Eigen::Index i = 0; i < nq; ++i) {
                T mx = s.row(i).maxCoeff();
                s.row(i) = (s.row(i).array() - mx).exp();
                s.row(i) /= s.row(i).sum();
            }
            RowMat<T> o = s * vb;
            for (Eigen::Index i = 0; i < nq; ++i)
                for (std::size_t c = 0; c < dh; ++c) out[(blk.q_begin + i) * d + off + c] = o(i, c);
            probs->push_back(std::move(s));
        }
    }

    std::size_t iq = q.id, ik = k.id, iv = v.id;
    auto shared_blocks = std::make_shared<std::vector<AttnBlock>>(std::move(blocks));
    return q.tape->record(
        std::move(out), {iq, ik, iv},
        [iq, ik, iv, heads, d, dh, scale_factor, probs, shared_blocks](Tape<T>& tape, std::size_t self) {
            const auto& g = tape.grad(self);
            const auto& qv = tape.value(iq);
            const auto& kv = tape.value(ik);
            const auto& vv = tape.value(iv);
            const bool nq_grad = tape.needs_grad(iq), nk_grad = tape.needs_grad(ik), nv_grad = tape.needs_grad(iv);
            std::vector<T>* gq = nq_grad ? &tape.grad(iq) : nullptr;
            std::vector<T>* gk = nk_grad ? &tape.grad(ik) : nullptr;
            std::vector<T>* gv = nv_grad ? &tape.grad(iv) : nullptr;
            std::size_t pi = 0;
            for (const auto& blk : *shared_blocks) {
                const auto nq = static_cast<Eigen::Index>(blk.q_count);
                const auto nk = static_cast<Eigen::Index>(blk.keys.size());
                for (std::size_t h = 0; h < heads; ++h, ++pi) {
                    const std::size_t off = h * dh;
                    const RowMat<T>& p = (*probs)[pi];
                    RowMat<T> go(nq, dh), qb(nq, dh), kb(nk, dh), vb(nk, dh);
                    for (Eigen::Index i = 0; i < nq; ++i)
                        for (std::size_t c = 0; c < dh; ++c) {
                            go(i, c) = g[(blk.q_begin + i) * d + off + c];
                            qb(i, c) = qv[(blk.q_begin + i) * d + off + c];
                        }
                    for (Eigen::Index j = 0; j < nk; ++j)
                        for (std::size_t c = 0; c < dh; ++c) {
                            kb(j, c) = kv[blk.keys[j] * d + off + c];
                            vb(j, c) = vv[blk.keys[j] * d + off + c];
                        }
                    if (gv) {
                        RowMat<T> dv = p.transpose() * go;
                        for (Eigen::Index j = 0; j < nk; ++j)
                            for (std::size_t c = 0; c < dh; ++c) (*gv)[blk.keys[j] * d + off + c] += dv(j, c);
                    }
                    if (!gq && !gk) continue;
                    RowMat<T> dp = go * vb.transpose();
                    RowMat<T> ds(nq, nk);
                    for (Eigen::Index i = 0; i < nq; ++i) {
                        T dot = (dp.row(i).array() * p.row(i).array()).sum();
                        ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
                    }
                    if (gq) {
                        RowMat<T> dq = (ds * kb) * scale_factor;
                        for (Eigen::Index i = 0; i < nq; ++i)
                            for (std::size_t c = 0; c < dh; ++c) (*gq)[(blk.q_begin + i) * d + off + c] += dq(i, c);
                    }
                    if (gk) {
                        RowMat<T> dk = (ds.transpose() * qb) * scale_factor;
                        for (Eigen::Index j = 0; j < nk; ++j)
                            for (std::size_t c = 0; c < dh; ++c) (*gk)[blk.keys[j] * d + off + c] += dk(j, c);
                    }
                }
            }
        });
}

template <typename T>
void check_qkv(const char* op, Var<T> q, Var<T> k, Var<T> v, std::size_t heads) {
    const std::size_t d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows())
        throw DimensionError(std::string(op) + ": q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                             ", v " + shape_str(v.shape()) + " are not compatible");
    if (heads == 0 || d % heads != 0)
        throw DimensionError(std::string(op) + ": width " + std::to_string(d) + " is not divisible by " +
                             std::to_string(heads) + " heads");
}

}  // namespace

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, const AttentionMask* mask) {
    check_qkv("attention", q, k, v, heads);
    const std::size_t nq = q.rows(), nk = k.rows();
    AttnBlock blk{0, nq, {}};
    std::shared_ptr<const AttentionMask> shared_mask;
    if (mask) {
        if (mask->rows() != nq || mask->cols() != nk)
            throw DimensionError("attention: mask [" + std::to_string(mask->rows()) + "x" +
                                 std::to_string(mask->cols()) + "] does not match " + std::to_string(nq) +
                                 " queries x " + std::to_string(nk) + " keys");
        std::vector<bool> active(nk, false);
        for (std::size_t i = 0; i < nq; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < nk; ++j) {
                if ((*mask)(i, j)) {
                    any = true;
                    active[j] = true;
                }
            }
            if (!any) throw ContractError("attention: isolated query " + std::to_string(i) + " has no allowed key");
        }
        for (std::size_t j = 0; j < nk; ++j)
            if (active[j]) blk.keys.push_back(j);
        shared_mask = std::make_shared<const AttentionMask>(*mask);
    } else {
        blk.keys.resize(nk);
        for (std::size_t j = 0; j < nk; ++j) blk.keys[j] = j;
    }
    return attention_blocks(q, k, v, heads, {std::move(blk)}, std::move(shared_mask));
}

template <typename T>
Var<T> grouped_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::size_t q_group,
                         std::size_t k_group) {
    check_qkv("grouped_attention", q, k, v, heads);
    if (q_group == 0 || k_group == 0 || q.rows() % q_group != 0 || k.rows() % k_group != 0 ||
        q.rows() / q_group != k.rows() / k_group)
        throw DimensionError("grouped_attention: " + std::to_string(q.rows()) + " queries / " +
                             std::to_string(k.rows()) + " keys do not split into groups of " +
                             std::to_string(q_group) + " / " + std::to_string(k_group));
    const std::size_t groups = q.rows() / q_group;
    std::vector<AttnBlock> blocks(groups);
    for (std::size_t g = 0; g < groups; ++g) {
        blocks[g].q_begin = g * q_group;
        blocks[g].q_count = q_group;
        blocks[g].keys.resize(k_group);
        for (std::size_t j = 0; j < k_group; ++j) blocks[g].keys[j] = g * k_group + j;
    }
    return attention_blocks(q, k, v, heads, std::move(blocks), nullptr);
}

template <typename T>
Var<T> gaussian_loglik_sum(Var<T> mu, Var<T> sigma, const Tensor<T>& y) {
    require_same("gaussian_loglik_sum", mu.shape(), sigma.shape());
    if (y.numel() != mu.value().numel())
        throw DimensionError("gaussian_loglik_sum: targets " + shape_str(y.shape()) + " vs predictions " +
                             shape_str(mu.shape()));
    const auto& mv = mu.value();
    const auto& sv = sigma.value();
    const T half_log_2pi = T(0.5) * std::log(T(2) * std::numbers::pi_v<T>);
    T total{0};
    for (std::size_t i = 0; i < mv.numel(); ++i) {
        // NaN passes through so training can abort with the step number
        if (sv[i] <= T{0}) throw ContractError("gaussian_loglik_sum: sigma must be positive");
        T z = (y[i] - mv[i]) / sv[i];
        total += -std::log(sv[i]) - half_log_2pi - T(0.5) * z * z;
    }
    std::size_t im = mu.id, is = sigma.id;
    return mu.tape->record(Tensor<T>({1}, {total}), {im, is}, [im, is, y](Tape<T>& tape, std::size_t self) {
        T g = tape.grad(self)[0];
        const auto& mv = tape.value(im);
        const auto& sv = tape.value(is);
        if (tape.needs_grad(im)) {
            auto& gm = tape.grad(im);
            for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += g * (y[i] - mv[i]) / (sv[i] * sv[i]);
        }
        if (tape.needs_grad(is)) {
            auto& gs = tape.grad(is);
            for (std::size_t i = 0; i < gs.size(); ++i) {
                T r = y[i] - mv[i];
                gs[i] += g * (-T{1} / sv[i] + r * r / (sv[i] * sv[i] * sv[i]));
            }
        }
    });
}

template <typename T>
Var<T> kl_diag(Var<T> m1, Var<T> v1, Var<T> m2, Var<T> v2) {
    require_same("kl_diag", m1.shape(), v1.shape());
    require_same("kl_diag", m1.shape(), m2.shape());
    require_same("kl_diag", m1.shape(), v2.shape());
    const auto &a = m1.value(), &va = v1.value(), &b = m2.value(), &vb = v2.value();
    T total{0};
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (va[i] <= T{0} || vb[i] <= T{0}) throw ContractError("kl_diag: variances must be positive");
        T dm = a[i] - b[i];
        total += T(0.5) * (std::log(vb[i] / va[i]) + (va[i] + dm * dm) / vb[i] - T{1});
    }
    std::size_t i1 = m1.id, j1 = v1.id, i2 = m2.id, j2 = v2.id;
    return m1.tape->record(Tensor<T>({1}, {total}), {i1, j1, i2, j2}, [i1, j1, i2, j2](Tape<T>& tape, std::size_t self) {
        T g = tape.grad(self)[0];
        const auto &a = tape.value(i1), &va = tape.value(j1), &b = tape.value(i2), &vb = tape.value(j2);
        const std::size_t n = a.numel();
        if (tape.needs_grad(i1)) {
            auto& gr = tape.grad(i1);
            for (std::size_t i = 0; i < n; ++i) gr[i] += g * (a[i] - b[i]) / vb[i];
        }
        if (tape.needs_grad(i2)) {
            auto& gr = tape.grad(i2);
            for (std::size_t i = 0; i < n; ++i) gr[i] -= g * (a[i] - b[i]) / vb[i];
        }
        if (tape.needs_grad(j1)) {
            auto& gr = tape.grad(j1);
            for (std::size_t i = 0; i < n; ++i) gr[i] += g * T(0.5) * (T{1} / vb[i] - T{1} / va[i]);
        }
        if (tape.needs_grad(j2)) {
            auto& gr = tape.grad(j2);
            for (std::size_t i = 0; i < n; ++i) {
                T dm = a[i] - b[i];
                gr[i] += g * T(0.5) * (T{1} / vb[i] - (va[i] + dm * dm) / (vb[i] * vb[i]));
            }
        }
    });
}

#define DANP_INSTANTIATE_OPS(T)                                                                        \
    template Var<T> matmul(Var<T>, Var<T>);                                                           \
    template Var<T> transpose(Var<T>);                                                                \
    template Var<T> add(Var<T>, Var<T>);                                                              \
    template Var<T> sub(Var<T>, Var<T>);                                                              \
    template Var<T> mul(Var<T>, Var<T>);                                                              \
    template Var<T> add_row(Var<T>, Var<T>);                                                          \
    template Var<T> scale(Var<T>, T);                                                                 \
    template Var<T> add_scalar(Var<T>, T);                                                            \
    template Var<T> relu(Var<T>);                                                                     \
    template Var<T> gelu(Var<T>);                                                                     \
    template Var<T> exp(Var<T>);                                                                      \
    template Var<T> log(Var<T>);                                                                      \
    template Var<T> softplus(Var<T>);                                                                 \
    template Var<T> square(Var<T>);                                                                   \
    template Var<T> softmax_rows(Var<T>);                                                             \
    template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                            \
    template Var<T> concat_cols(Var<T>, Var<T>);                                                      \
    template Var<T> concat_rows(Var<T>, Var<T>);                                                      \
    template Var<T> gather_rows(Var<T>, std::vector<std::size_t>);                                    \
    template Var<T> segment_mean_rows(Var<T>, std::size_t);                                           \
    template Var<T> mean_rows(Var<T>);                                                                \
    template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                     \
    template Var<T> reshape(Var<T>, Shape);                                                           \
    template Var<T> sum(Var<T>);                                                                      \
    template Var<T> mean(Var<T>);                                                                     \
    template Var<T> attention(Var<T>, Var<T>, Var<T>, std::size_t, const AttentionMask*);             \
    template Var<T> grouped_attention(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t, std::size_t); \
    template Var<T> gaussian_loglik_sum(Var<T>, Var<T>, const Tensor<T>&);                            \
    template Var<T> kl_diag(Var<T>, Var<T>, Var<T>, Var<T>);

DANP_INSTANTIATE_OPS(float)
DANP_INSTANTIATE_OPS(double)

#undef DANP_INSTANTIATE_OPS

}  // namespace danp::ops
