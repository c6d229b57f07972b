#pragma once

#include <cmath>
#include <vector>

#include "dipa/ops.hpp"
#include "dipa/tensor.hpp"

// Loss kernels over a cosine-similarity matrix S[M x N] (rows = samples,
// columns = anchors/centroids). Each kernel can optionally export its exact
// gradient w.r.t. S for the tape adjoint.
namespace dipa::losses {

struct ProxyAnchorParams {
    double margin = 0.1;  // delta
    double scale = 32.0;  // alpha
};

// l = (1/|A|) sum_a [ log(1 + sum_{x in X+_a} e^{alpha(delta - s)})
//                   + log(1 + sum_{x in X-_a} e^{alpha(s + delta)}) ]
// The constant 1 inside each log is treated as e^0 in the max shift, so the
// evaluation is stable for |alpha * s| far beyond f32 exp range. An anchor
// with no positives contributes log(1) = 0 from its positive term.
template <typename T>
T proxy_anchor_from_sims(const Tensor<T>& sims, const std::vector<int>& labels,
                         const ProxyAnchorParams& params, Tensor<T>* grad_out = nullptr) {
    if (sims.rank() != 2 || labels.size() != sims.dim(0))
        throw ShapeError("proxy_anchor: need sims [M x N] with one label per row");
    const std::size_t m = sims.dim(0), n = sims.dim(1);
    if (m == 0) throw DataError("proxy_anchor: empty sample set");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= n)
            throw DataError("proxy_anchor: label out of anchor range");

    const T alpha = static_cast<T>(params.scale);
    const T delta = static_cast<T>(params.margin);
    Tensor<T> grad(sims.shape());
    T loss = T(0);

    for (std::size_t a = 0; a < n; ++a) {
        // positive term
        T mx = T(0);  // exponent of the implicit leading 1
        for (std::size_t i = 0; i < m; ++i)
            if (static_cast<std::size_t>(labels[i]) == a)
                mx = std::max(mx, alpha * (delta - sims.at(i, a)));
        T denom = std::exp(-mx);
        for (std::size_t i = 0; i < m; ++i)
            if (static_cast<std::size_t>(labels[i]) == a)
                denom += std::exp(alpha * (delta - sims.at(i, a)) - mx);
        loss += mx + std::log(denom);
        if (grad_out)
            for (std::size_t i = 0; i < m; ++i)
                if (static_cast<std::size_t>(labels[i]) == a)
                    grad.at(i, a) =
                        -alpha / static_cast<T>(n) *
                        (std::exp(alpha * (delta - sims.at(i, a)) - mx) / denom);

        // negative term
        mx = T(0);
        for (std::size_t i = 0; i < m; ++i)
            if (static_cast<std::size_t>(labels[i]) != a)
                mx = std::max(mx, alpha * (sims.at(i, a) + delta));
        denom = std::exp(-mx);
        for (std::size_t i = 0; i < m; ++i)
            if (static_cast<std::size_t>(labels[i]) != a)
                denom += std::exp(alpha * (sims.at(i, a) + delta) - mx);
        loss += mx + std::log(denom);
        if (grad_out)
            for (std::size_t i = 0; i < m; ++i)
                if (static_cast<std::size_t>(labels[i]) != a)
                    grad.at(i, a) =
                        alpha / static_cast<T>(n) *
                        (std::exp(alpha * (sims.at(i, a) + delta) - mx) / denom);
    }
    loss /= static_cast<T>(n);
    if (!std::isfinite(loss)) throw NumericalError("proxy_anchor: non-finite loss");
    if (grad_out) *grad_out = std::move(grad);
    return loss;
}

// Mean cross entropy of row-wise softmax(logits) against integer labels.
template <typename T>
T softmax_xent(const Tensor<T>& logits, const std::vector<int>& labels,
               Tensor<T>* grad_out = nullptr) {
    if (logits.rank() != 2 || labels.size() != logits.dim(0))
        throw ShapeError("softmax_xent: need logits [M x N] with one label per row");
    const std::size_t m = logits.dim(0), n = logits.dim(1);
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= n)
            throw DataError("softmax_xent: label out of range");

    Tensor<T> probs = ops::softmax(logits);
    T loss = T(0);
    for (std::size_t i = 0; i < m; ++i) {
        T mx = logits.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits.at(i, j));
        T lse = T(0);
        for (std::size_t j = 0; j < n; ++j) lse += std::exp(logits.at(i, j) - mx);
        loss += mx + std::log(lse) - logits.at(i, static_cast<std::size_t>(labels[i]));
    }
    loss /= static_cast<T>(m);
    if (!std::isfinite(loss)) throw NumericalError("softmax_xent: non-finite loss");
    if (grad_out) {
        Tensor<T> grad = probs;
        for (std::size_t i = 0; i < m; ++i)
            grad.at(i, static_cast<std::size_t>(labels[i])) -= T(1);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] /= static_cast<T>(m);
        *grad_out = std::move(grad);
    }
    return loss;
}

}  // namespace dipa::losses
