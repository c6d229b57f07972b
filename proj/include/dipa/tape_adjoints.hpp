#pragma once

// Adjoint registry for the closed op set. One entry per differentiable op;
// each adjoint is independently covered by the finite-difference harness.

#include <cmath>
#include <unordered_map>

#include "dipa/tape.hpp"

namespace dipa {

namespace adjoint_detail {

// Sum a gradient of shape [..., n] down to the rank-1 [n] broadcast operand.
template <typename T>
Tensor<T> sum_to_last_axis(const Tensor<T>& g) {
    const std::size_t n = g.last_dim();
    Tensor<T> out(Shape{n});
    for (std::size_t r = 0; r < g.row_count(); ++r)
        for (std::size_t j = 0; j < n; ++j) out[j] += g[r * n + j];
    return out;
}

// dA = G * B^T for the batched matmul a[..., m, k] x b[(...,) k, n].
template <typename T>
Tensor<T> matmul_grad_a(const Tensor<T>& g, const Tensor<T>& b, const Shape& a_shape) {
    const std::size_t m = a_shape[a_shape.size() - 2];
    const std::size_t k = a_shape[a_shape.size() - 1];
    const std::size_t n = b.last_dim();
    const std::size_t batch = shape_numel(a_shape) / (m * k);
    const bool b_batched = b.rank() > 2;
    Tensor<T> da(a_shape);
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* pg = g.data().data() + bi * m * n;
        const T* pb = b.data().data() + (b_batched ? bi * k * n : 0);
        T* pa = da.data().data() + bi * m * k;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
                T acc = T(0);
                for (std::size_t j = 0; j < n; ++j) acc += pg[i * n + j] * pb[l * n + j];
                pa[i * k + l] = acc;
            }
    }
    return da;
}

// dB = A^T * G; a shared (2-D) b accumulates across the batch.
template <typename T>
Tensor<T> matmul_grad_b(const Tensor<T>& g, const Tensor<T>& a, const Shape& b_shape) {
    const std::size_t k = b_shape[b_shape.size() - 2];
    const std::size_t n = b_shape[b_shape.size() - 1];
    const std::size_t m = a.shape()[a.rank() - 2];
    const std::size_t batch = a.size() / (m * k);
    const bool b_batched = b_shape.size() > 2;
    Tensor<T> db(b_shape);
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* pa = a.data().data() + bi * m * k;
        const T* pg = g.data().data() + bi * m * n;
        T* pb = db.data().data() + (b_batched ? bi * k * n : 0);
        for (std::size_t l = 0; l < k; ++l)
            for (std::size_t j = 0; j < n; ++j) {
                T acc = T(0);
                for (std::size_t i = 0; i < m; ++i) acc += pa[i * k + l] * pg[i * n + j];
                pb[l * n + j] += acc;
            }
    }
    return db;
}

template <typename T>
std::unordered_map<OpKind, AdjointFn<T>> make_default_adjoints() {
    std::unordered_map<OpKind, AdjointFn<T>> reg;
    using Node = TapeNode<T>;
    using Accum = std::function<void(std::size_t, Tensor<T>&&)>;

    reg[OpKind::MatMul] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g,
                             const Accum& acc) {
        const Tensor<T>& a = t.value(n.inputs[0]);
        const Tensor<T>& b = t.value(n.inputs[1]);
        if (t.node(n.inputs[0]).requires_grad) acc(0, matmul_grad_a(g, b, a.shape()));
        if (t.node(n.inputs[1]).requires_grad) acc(1, matmul_grad_b(g, a, b.shape()));
    };

    reg[OpKind::Add] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g, const Accum& acc) {
        const Tensor<T>& b = t.value(n.inputs[1]);
        acc(0, Tensor<T>(g));
        if (b.same_shape(g))
            acc(1, Tensor<T>(g));
        else
            acc(1, sum_to_last_axis(g));
    };

    reg[OpKind::Mul] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g, const Accum& acc) {
        const Tensor<T>& a = t.value(n.inputs[0]);
        const Tensor<T>& b = t.value(n.inputs[1]);
        if (b.same_shape(a)) {
            Tensor<T> da = g;
            for (std::size_t i = 0; i < da.size(); ++i) da[i] *= b[i];
            acc(0, std::move(da));
            Tensor<T> db = g;
            for (std::size_t i = 0; i < db.size(); ++i) db[i] *= a[i];
            acc(1, std::move(db));
        } else {
            const std::size_t m = a.last_dim();
            Tensor<T> da = g;
            for (std::size_t r = 0; r < a.row_count(); ++r)
                for (std::size_t j = 0; j < m; ++j) da[r * m + j] *= b[j];
            acc(0, std::move(da));
            Tensor<T> db(Shape{m});
            for (std::size_t r = 0; r < a.row_count(); ++r)
                for (std::size_t j = 0; j < m; ++j) db[j] += g[r * m + j] * a[r * m + j];
            acc(1, std::move(db));
        }
    };

    reg[OpKind::ScalarMul] = [](const Tape<T>&, const Node& n, const Tensor<T>& g,
                                const Accum& acc) {
        acc(0, ops::scalar_mul(g, n.scalar));
    };

    reg[OpKind::Concat] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g,
                             const Accum& acc) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            const std::size_t extent = t.value(n.inputs[i]).shape()[n.axis];
            if (t.node(n.inputs[i]).requires_grad)
                acc(i, ops::slice(g, n.axis, offset, extent));
            offset += extent;
        }
    };

    reg[OpKind::Slice] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g,
                            const Accum& acc) {
        acc(0, ops::pad_slice(g, t.value(n.inputs[0]).shape(), n.axis, n.start));
    };

    reg[OpKind::Transpose] = [](const Tape<T>&, const Node& n, const Tensor<T>& g,
                                const Accum& acc) {
        std::vector<std::size_t> inverse(n.perm.size());
        for (std::size_t i = 0; i < n.perm.size(); ++i) inverse[n.perm[i]] = i;
        acc(0, ops::transpose(g, inverse));
    };

    reg[OpKind::Reshape] = [](const Tape<T>&, const Node& n, const Tensor<T>& g,
                              const Accum& acc) {
        acc(0, ops::reshape(g, n.prev_shape));
    };

    // Composite adjoint for the whole normalize-then-affine op; mean and
    // variance terms are folded in analytically.
    reg[OpKind::LayerNorm] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g,
                                const Accum& acc) {
        const Tensor<T>& gain = t.value(n.inputs[1]);
        const Tensor<T>& xhat = n.saved[0];
        const Tensor<T>& inv_std = n.saved[1];
        const std::size_t e = g.last_dim();
        const std::size_t rows = g.row_count();

        if (t.node(n.inputs[0]).requires_grad) {
            Tensor<T> dx(g.shape());
            for (std::size_t r = 0; r < rows; ++r) {
                T mean_gh = T(0), mean_gh_xhat = T(0);
                for (std::size_t j = 0; j < e; ++j) {
                    const T gh = g[r * e + j] * gain[j];
                    mean_gh += gh;
                    mean_gh_xhat += gh * xhat[r * e + j];
                }
                mean_gh /= static_cast<T>(e);
                mean_gh_xhat /= static_cast<T>(e);
                for (std::size_t j = 0; j < e; ++j) {
                    const T gh = g[r * e + j] * gain[j];
                    dx[r * e + j] =
                        inv_std[r] * (gh - mean_gh - xhat[r * e + j] * mean_gh_xhat);
                }
            }
            acc(0, std::move(dx));
        }
        if (t.node(n.inputs[1]).requires_grad) {
            Tensor<T> dgain(Shape{e});
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < e; ++j) dgain[j] += g[r * e + j] * xhat[r * e + j];
            acc(1, std::move(dgain));
        }
        if (t.node(n.inputs[2]).requires_grad) acc(2, sum_to_last_axis(g));
    };

    reg[OpKind::Softmax] = [](const Tape<T>&, const Node& n, const Tensor<T>& g,
                              const Accum& acc) {
        const Tensor<T>& y = n.value;
        const std::size_t m = y.last_dim();
        Tensor<T> dx(y.shape());
        for (std::size_t r = 0; r < y.row_count(); ++r) {
            T dot = T(0);
            for (std::size_t j = 0; j < m; ++j) dot += g[r * m + j] * y[r * m + j];
            for (std::size_t j = 0; j < m; ++j)
                dx[r * m + j] = y[r * m + j] * (g[r * m + j] - dot);
        }
        acc(0, std::move(dx));
    };

    reg[OpKind::Gelu] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g,
                           const Accum& acc) {
        const Tensor<T>& x = t.value(n.inputs[0]);
        Tensor<T> dx(x.shape());
        constexpr T inv_sqrt_2pi = T(0.3989422804014326779);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const T v = x[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            dx[i] = g[i] * (cdf + v * pdf);
        }
        acc(0, std::move(dx));
    };

    reg[OpKind::L2Normalize] = [](const Tape<T>&, const Node& n, const Tensor<T>& g,
                                  const Accum& acc) {
        const Tensor<T>& y = n.value;
        const Tensor<T>& norms = n.saved[0];
        const std::size_t m = y.last_dim();
        Tensor<T> dx(y.shape());
        for (std::size_t r = 0; r < y.row_count(); ++r) {
            T dot = T(0);
            for (std::size_t j = 0; j < m; ++j) dot += g[r * m + j] * y[r * m + j];
            for (std::size_t j = 0; j < m; ++j)
                dx[r * m + j] = (g[r * m + j] - dot * y[r * m + j]) / norms[r];
        }
        acc(0, std::move(dx));
    };

    reg[OpKind::ScaleShift] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g,
                                 const Accum& acc) {
        const Tensor<T>& x = t.value(n.inputs[0]);
        const Tensor<T>& gamma = t.value(n.inputs[1]);
        const std::size_t d = x.last_dim();
        if (t.node(n.inputs[0]).requires_grad) {
            Tensor<T> dx = g;
            for (std::size_t r = 0; r < x.row_count(); ++r)
                for (std::size_t j = 0; j < d; ++j) dx[r * d + j] *= gamma[j];
            acc(0, std::move(dx));
        }
        if (t.node(n.inputs[1]).requires_grad) {
            Tensor<T> dgamma(Shape{d});
            for (std::size_t r = 0; r < x.row_count(); ++r)
                for (std::size_t j = 0; j < d; ++j) dgamma[j] += g[r * d + j] * x[r * d + j];
            acc(1, std::move(dgamma));
        }
        if (t.node(n.inputs[2]).requires_grad) acc(2, sum_to_last_axis(g));
    };

    reg[OpKind::Sum] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g,
                          const Accum& acc) {
        acc(0, Tensor<T>::full(t.value(n.inputs[0]).shape(), g.item()));
    };

    reg[OpKind::CosineSim] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g,
                                const Accum& acc) {
        const Tensor<T>& s = n.value;
        const Tensor<T>& xn = n.saved[0];
        const Tensor<T>& an = n.saved[1];
        const Tensor<T>& xnorm = n.saved[2];
        const Tensor<T>& anorm = n.saved[3];
        const std::size_t m = s.dim(0), nc = s.dim(1), d = xn.dim(1);
        if (t.node(n.inputs[0]).requires_grad) {
            Tensor<T> dx(Shape{m, d});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < nc; ++j) {
                    const T gij = g.at(i, j);
                    if (gij == T(0)) continue;
                    for (std::size_t l = 0; l < d; ++l)
                        dx.at(i, l) += gij * (an.at(j, l) - s.at(i, j) * xn.at(i, l)) / xnorm[i];
                }
            acc(0, std::move(dx));
        }
        if (t.node(n.inputs[1]).requires_grad) {
            Tensor<T> da(Shape{nc, d});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < nc; ++j) {
                    const T gij = g.at(i, j);
                    if (gij == T(0)) continue;
                    for (std::size_t l = 0; l < d; ++l)
                        da.at(j, l) += gij * (xn.at(i, l) - s.at(i, j) * an.at(j, l)) / anorm[j];
                }
            acc(1, std::move(da));
        }
    };

    reg[OpKind::ClassMeans] = [](const Tape<T>& t, const Node& n, const Tensor<T>& g,
                                 const Accum& acc) {
        const Tensor<T>& x = t.value(n.inputs[0]);
        const std::size_t n_classes = n.value.dim(0);
        const std::size_t d = x.dim(1);
        std::vector<std::size_t> counts(n_classes, 0);
        for (int y : n.labels) ++counts[static_cast<std::size_t>(y)];
        Tensor<T> dx(x.shape());
        for (std::size_t i = 0; i < n.labels.size(); ++i) {
            const auto y = static_cast<std::size_t>(n.labels[i]);
            for (std::size_t j = 0; j < d; ++j)
                dx.at(i, j) = g.at(y, j) / static_cast<T>(counts[y]);
        }
        acc(0, std::move(dx));
    };

    // Both loss ops computed dLoss/dS at forward time (saved[0]).
    auto loss_adjoint = [](const Tape<T>&, const Node& n, const Tensor<T>& g, const Accum& acc) {
        acc(0, ops::scalar_mul(n.saved[0], static_cast<double>(g.item())));
    };
    reg[OpKind::ProxyAnchorLoss] = loss_adjoint;
    reg[OpKind::SoftmaxXent] = loss_adjoint;

    return reg;
}

}  // namespace adjoint_detail

template <typename T>
std::unordered_map<OpKind, AdjointFn<T>>& adjoint_registry() {
    static std::unordered_map<OpKind, AdjointFn<T>> registry =
        adjoint_detail::make_default_adjoints<T>();
    return registry;
}

// Fault-injection hooks for the gradient-check harness: replace one adjoint
// with a deliberately wrong version, then restore the defaults.
template <typename T>
void corrupt_adjoint_for_testing(OpKind kind) {
    auto& reg = adjoint_registry<T>();
    AdjointFn<T> original = reg.at(kind);
    reg[kind] = [original](const Tape<T>& t, const TapeNode<T>& n, const Tensor<T>& g,
                           const std::function<void(std::size_t, Tensor<T>&&)>& acc) {
        auto skewed = [&acc](std::size_t idx, Tensor<T>&& grad) {
            acc(idx, ops::scalar_mul(grad, 1.5));
        };
        original(t, n, g, skewed);
    };
}

template <typename T>
void reset_adjoints() {
    adjoint_registry<T>() = adjoint_detail::make_default_adjoints<T>();
}

}  // namespace dipa
