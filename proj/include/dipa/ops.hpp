#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dipa/tensor.hpp"

// Forward kernels for the closed op set. Every public kernel validates shapes
// up front and checks its result for NaN/Inf before returning.
namespace dipa::ops {

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& x) {
    return Tensor<T>(x.shape());
}

namespace detail {

inline std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
    std::size_t p = 1;
    for (std::size_t i = from; i < to; ++i) p *= s[i];
    return p;
}

}  // namespace detail

// a: [..., m, k]; b: [k, n] (shared across the batch) or [..., k, n] with
// leading extents equal to a's. Plain triple loop; no BLAS by design.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    const std::size_t m = a.shape()[a.rank() - 2];
    const std::size_t k = a.shape()[a.rank() - 1];
    const std::size_t kb = b.shape()[b.rank() - 2];
    const std::size_t n = b.shape()[b.rank() - 1];
    if (k != kb)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::size_t batch = detail::prod(a.shape(), 0, a.rank() - 2);
    const bool b_batched = b.rank() > 2;
    if (b_batched) {
        if (Shape(b.shape().begin(), b.shape().end() - 2) !=
            Shape(a.shape().begin(), a.shape().end() - 2))
            throw ShapeError("matmul: batch extents disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }

    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);

    for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* pa = a.data().data() + bi * m * k;
        const T* pb = b.data().data() + (b_batched ? bi * k * n : 0);
        T* po = out.data().data() + bi * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                T acc = T(0);
                for (std::size_t l = 0; l < k; ++l) acc += pa[i * k + l] * pb[l * n + j];
                po[i * n + j] = acc;
            }
        }
    }
    check_finite(out, "matmul");
    return out;
}

// Elementwise add; b may be rank-1 and broadcast over the last axis.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> out = a;
    if (a.same_shape(b)) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    } else if (b.rank() == 1 && b.size() == a.last_dim()) {
        const std::size_t n = a.last_dim();
        for (std::size_t r = 0; r < a.row_count(); ++r)
            for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b[j];
    } else {
        throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " + " +
                         shape_str(b.shape()));
    }
    check_finite(out, "add");
    return out;
}

// Elementwise multiply; same broadcast rule as add.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> out = a;
    if (a.same_shape(b)) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    } else if (b.rank() == 1 && b.size() == a.last_dim()) {
        const std::size_t n = a.last_dim();
        for (std::size_t r = 0; r < a.row_count(); ++r)
            for (std::size_t j = 0; j < n; ++j) out[r * n + j] *= b[j];
    } else {
        throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
    }
    check_finite(out, "mul");
    return out;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, double c) {
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(out[i] * c);
    check_finite(out, "scalar_mul");
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t rank = parts[0].rank();
    if (axis >= rank) throw ShapeError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < rank; ++d)
            if (d != axis && p.shape()[d] != out_shape[d])
                throw ShapeError("concat: non-axis extent mismatch at axis " + std::to_string(d));
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;
    Tensor<T> out(out_shape);

    const std::size_t outer = detail::prod(out_shape, 0, axis);
    const std::size_t inner = detail::prod(out_shape, axis + 1, rank);
    std::size_t axis_offset = 0;
    for (const auto& p : parts) {
        const std::size_t pa = p.shape()[axis];
        for (std::size_t o = 0; o < outer; ++o) {
            const T* src = p.data().data() + o * pa * inner;
            T* dst = out.data().data() + (o * axis_total + axis_offset) * inner;
            std::copy(src, src + pa * inner, dst);
        }
        axis_offset += pa;
    }
    check_finite(out, "concat");
    return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.rank()) throw ShapeError("slice: axis out of range");
    if (start + len > x.shape()[axis] || len == 0)
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds extent " +
                         std::to_string(x.shape()[axis]));
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    Tensor<T> out(out_shape);
    const std::size_t outer = detail::prod(x.shape(), 0, axis);
    const std::size_t inner = detail::prod(x.shape(), axis + 1, x.rank());
    const std::size_t ax = x.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = x.data().data() + (o * ax + start) * inner;
        T* dst = out.data().data() + o * len * inner;
        std::copy(src, src + len * inner, dst);
    }
    return out;
}

// Inverse of slice along one axis: place `g` into a zero tensor of shape
// `full_shape` at offset `start`. Used by the slice adjoint.
template <typename T>
Tensor<T> pad_slice(const Tensor<T>& g, const Shape& full_shape, std::size_t axis,
                    std::size_t start) {
    Tensor<T> out(full_shape);
    const std::size_t outer = detail::prod(full_shape, 0, axis);
    const std::size_t inner = detail::prod(full_shape, axis + 1, full_shape.size());
    const std::size_t ax = full_shape[axis];
    const std::size_t len = g.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = g.data().data() + o * len * inner;
        T* dst = out.data().data() + (o * ax + start) * inner;
        std::copy(src, src + len * inner, dst);
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t rank = x.rank();
    if (perm.size() != rank) throw ShapeError("transpose: perm length mismatch");
    std::vector<bool> seen(rank, false);
    for (std::size_t p : perm) {
        if (p >= rank || seen[p]) throw ShapeError("transpose: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[perm[i]];
    Tensor<T> out(out_shape);

    std::vector<std::size_t> in_strides(rank, 1), out_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * x.shape()[i];
        out_strides[i - 1] = out_strides[i] * out_shape[i];
    }
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t o = 0; o < out.size(); ++o) {
        std::size_t rem = o, src = 0;
        for (std::size_t i = 0; i < rank; ++i) {
            idx[i] = rem / out_strides[i];
            rem %= out_strides[i];
            src += idx[i] * in_strides[perm[i]];
        }
        out[o] = x[src];
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(new_shape));
    return Tensor<T>(std::move(new_shape), x.data());
}

// Per-last-axis normalization followed by affine gain/bias. `xhat` and
// `inv_std` are written for the composite adjoint when requested.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps,
                    Tensor<T>* xhat_out = nullptr, Tensor<T>* inv_std_out = nullptr) {
    const std::size_t e = x.last_dim();
    if (eps <= 0) throw UsageError("layernorm: eps must be positive");
    if (x.rank() == 0 || e == 0) throw ShapeError("layernorm: empty feature axis");
    if (gain.size() != e || bias.size() != e)
        throw ShapeError("layernorm: gain/bias length must equal feature dim " + std::to_string(e));

    const std::size_t rows = x.row_count();
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    Tensor<T> inv_std(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        const T* px = x.data().data() + r * e;
        T mean = T(0);
        for (std::size_t j = 0; j < e; ++j) mean += px[j];
        mean /= static_cast<T>(e);
        T var = T(0);
        for (std::size_t j = 0; j < e; ++j) {
            const T d = px[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(e);
        const T istd = T(1) / std::sqrt(var + static_cast<T>(eps));
        inv_std[r] = istd;
        for (std::size_t j = 0; j < e; ++j) {
            const T h = (px[j] - mean) * istd;
            xhat[r * e + j] = h;
            out[r * e + j] = gain[j] * h + bias[j];
        }
    }
    check_finite(out, "layernorm");
    if (xhat_out) *xhat_out = std::move(xhat);
    if (inv_std_out) *inv_std_out = std::move(inv_std);
    return out;
}

// Max-shifted softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    const std::size_t n = x.last_dim();
    if (n == 0) throw ShapeError("softmax: empty axis");
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < x.row_count(); ++r) {
        const T* px = x.data().data() + r * n;
        T* po = out.data().data() + r * n;
        T mx = px[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, px[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            po[j] = std::exp(px[j] - mx);
            sum += po[j];
        }
        for (std::size_t j = 0; j < n; ++j) po[j] /= sum;
    }
    check_finite(out, "softmax");
    return out;
}

// Exact erf formulation, not the tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out = x;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = out[i];
        out[i] = T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2)));
    }
    check_finite(out, "gelu");
    return out;
}

inline constexpr double kNormEps = 1e-12;

// Row-wise L2 normalization. Rows with norm <= eps are degenerate and
// surfaced as an error rather than silently divided.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, double eps = kNormEps, Tensor<T>* norms_out = nullptr) {
    const std::size_t n = x.last_dim();
    const std::size_t rows = x.row_count();
    Tensor<T> out(x.shape());
    Tensor<T> norms(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        const T* px = x.data().data() + r * n;
        T sq = T(0);
        for (std::size_t j = 0; j < n; ++j) sq += px[j] * px[j];
        const T norm = std::sqrt(sq);
        if (!(norm > static_cast<T>(eps)))
            throw NumericalError("l2_normalize: degenerate row " + std::to_string(r) +
                                 " with norm " + std::to_string(static_cast<double>(norm)));
        norms[r] = norm;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = px[j] / norm;
    }
    check_finite(out, "l2_normalize");
    if (norms_out) *norms_out = std::move(norms);
    return out;
}

// y = gamma (.) x + beta over the feature (last) axis.
template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
    const std::size_t d = x.last_dim();
    if (gamma.size() != d || beta.size() != d)
        throw ShapeError("scale_shift: parameter length " + std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) + " does not match feature dim " +
                         std::to_string(d));
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < x.row_count(); ++r)
        for (std::size_t j = 0; j < d; ++j)
            out[r * d + j] = gamma[j] * x[r * d + j] + beta[j];
    check_finite(out, "scale_shift");
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    check_finite(out, "sum");
    return out;
}

// Cosine similarity of one vector pair, clamped against rounding excess.
template <typename T>
T cosine_sim(const Tensor<T>& x, const Tensor<T>& a, double eps = kNormEps) {
    if (x.size() != a.size()) throw ShapeError("cosine_sim: length mismatch");
    T dot = T(0), nx = T(0), na = T(0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        dot += x[i] * a[i];
        nx += x[i] * x[i];
        na += a[i] * a[i];
    }
    nx = std::sqrt(nx);
    na = std::sqrt(na);
    if (!(nx > static_cast<T>(eps)) || !(na > static_cast<T>(eps)))
        throw NumericalError("cosine_sim: degenerate vector");
    return std::clamp(dot / (nx * na), T(-1), T(1));
}

// All-pairs cosine similarity, rows of X against rows of A -> [M x N].
// Normalized operands and row norms are exported for the adjoint.
template <typename T>
Tensor<T> cosine_sim_matrix(const Tensor<T>& x, const Tensor<T>& a, double eps = kNormEps,
                            Tensor<T>* xn_out = nullptr, Tensor<T>* an_out = nullptr,
                            Tensor<T>* xnorm_out = nullptr, Tensor<T>* anorm_out = nullptr) {
    if (x.rank() != 2 || a.rank() != 2 || x.last_dim() != a.last_dim())
        throw ShapeError("cosine_sim_matrix: need [M x D] and [N x D], got " +
                         shape_str(x.shape()) + " and " + shape_str(a.shape()));
    Tensor<T> xnorm, anorm;
    Tensor<T> xn = l2_normalize(x, eps, &xnorm);
    Tensor<T> an = l2_normalize(a, eps, &anorm);
    const std::size_t m = x.dim(0), n = a.dim(0), d = x.dim(1);
    Tensor<T> out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T dot = T(0);
            for (std::size_t l = 0; l < d; ++l) dot += xn.at(i, l) * an.at(j, l);
            out.at(i, j) = std::clamp(dot, T(-1), T(1));
        }
    check_finite(out, "cosine_sim_matrix");
    if (xn_out) *xn_out = std::move(xn);
    if (an_out) *an_out = std::move(an);
    if (xnorm_out) *xnorm_out = std::move(xnorm);
    if (anorm_out) *anorm_out = std::move(anorm);
    return out;
}

// Per-class arithmetic mean of rows. Every class 0..n_classes-1 must occur.
template <typename T>
Tensor<T> class_means(const Tensor<T>& x, const std::vector<int>& labels, std::size_t n_classes) {
    if (x.rank() != 2 || labels.size() != x.dim(0))
        throw ShapeError("class_means: need [M x D] with one label per row");
    const std::size_t d = x.dim(1);
    Tensor<T> out(Shape{n_classes, d});
    std::vector<std::size_t> counts(n_classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
            throw DataError("class_means: label " + std::to_string(y) + " out of range");
        ++counts[y];
        for (std::size_t j = 0; j < d; ++j) out.at(y, j) += x.at(i, j);
    }
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (counts[c] == 0)
            throw DataError("class_means: class " + std::to_string(c) + " has no samples");
        for (std::size_t j = 0; j < d; ++j) out.at(c, j) /= static_cast<T>(counts[c]);
    }
    check_finite(out, "class_means");
    return out;
}

}  // namespace dipa::ops
