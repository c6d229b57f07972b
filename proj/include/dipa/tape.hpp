#pragma once

#include <functional>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dipa/losses.hpp"
#include "dipa/ops.hpp"
#include "dipa/tensor.hpp"

namespace dipa {

enum class OpKind {
    Leaf,
    Constant,
    MatMul,
    Add,
    Mul,
    ScalarMul,
    Concat,
    Slice,
    Transpose,
    Reshape,
    LayerNorm,
    Softmax,
    Gelu,
    L2Normalize,
    ScaleShift,
    Sum,
    CosineSim,
    ClassMeans,
    ProxyAnchorLoss,
    SoftmaxXent,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Constant: return "constant";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::ScalarMul: return "scalar_mul";
        case OpKind::Concat: return "concat";
        case OpKind::Slice: return "slice";
        case OpKind::Transpose: return "transpose";
        case OpKind::Reshape: return "reshape";
        case OpKind::LayerNorm: return "layernorm";
        case OpKind::Softmax: return "softmax";
        case OpKind::Gelu: return "gelu";
        case OpKind::L2Normalize: return "l2_normalize";
        case OpKind::ScaleShift: return "scale_shift";
        case OpKind::Sum: return "sum";
        case OpKind::CosineSim: return "cosine_sim";
        case OpKind::ClassMeans: return "class_means";
        case OpKind::ProxyAnchorLoss: return "proxy_anchor_loss";
        case OpKind::SoftmaxXent: return "softmax_xent";
    }
    return "?";
}

template <typename T>
struct TapeNode {
    OpKind kind;
    std::vector<int> inputs;
    Tensor<T> value;
    bool requires_grad = false;

    // Op attributes (only the fields relevant to `kind` are meaningful).
    std::size_t axis = 0, start = 0;
    std::vector<std::size_t> perm;
    Shape prev_shape;
    double scalar = 0.0, eps = 0.0;
    std::vector<int> labels;
    std::vector<Tensor<T>> saved;
};

// Gradients of one backward pass, keyed by trainable-leaf node id. Every
// trainable leaf gets an entry; leaves the loss never touched hold zeros.
template <typename T>
struct GradMap {
    std::unordered_map<int, Tensor<T>> grads;

    const Tensor<T>& at(int leaf_id) const {
        auto it = grads.find(leaf_id);
        if (it == grads.end()) throw UsageError("GradMap: node is not a trainable leaf");
        return it->second;
    }
    std::size_t size() const { return grads.size(); }
};

template <typename T>
class Tape;

template <typename T>
using AdjointFn = std::function<void(
    const Tape<T>&, const TapeNode<T>&, const Tensor<T>& upstream,
    const std::function<void(std::size_t, Tensor<T>&&)>& accumulate)>;

template <typename T>
std::unordered_map<OpKind, AdjointFn<T>>& adjoint_registry();

// Append-only tape. Forward values are computed eagerly at record time; the
// backward pass walks node ids in reverse, so topological order holds by
// construction.
template <typename T>
class Tape {
public:
    int leaf(Tensor<T> v) {
        TapeNode<T> n;
        n.kind = OpKind::Leaf;
        n.value = std::move(v);
        n.requires_grad = true;
        const int id = push(std::move(n));
        leaves_.push_back(id);
        return id;
    }

    int constant(Tensor<T> v) {
        TapeNode<T> n;
        n.kind = OpKind::Constant;
        n.value = std::move(v);
        return push(std::move(n));
    }

    const Tensor<T>& value(int id) const { return nodes_.at(id).value; }
    const TapeNode<T>& node(int id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<int>& leaves() const { return leaves_; }

    int matmul(int a, int b) {
        TapeNode<T> n = make(OpKind::MatMul, {a, b});
        n.value = ops::matmul(value(a), value(b));
        return push(std::move(n));
    }

    int add(int a, int b) {
        TapeNode<T> n = make(OpKind::Add, {a, b});
        n.value = ops::add(value(a), value(b));
        return push(std::move(n));
    }

    int mul(int a, int b) {
        TapeNode<T> n = make(OpKind::Mul, {a, b});
        n.value = ops::mul(value(a), value(b));
        return push(std::move(n));
    }

    int scalar_mul(int a, double c) {
        TapeNode<T> n = make(OpKind::ScalarMul, {a});
        n.scalar = c;
        n.value = ops::scalar_mul(value(a), c);
        return push(std::move(n));
    }

    int concat(const std::vector<int>& parts, std::size_t axis) {
        TapeNode<T> n = make(OpKind::Concat, parts);
        n.axis = axis;
        std::vector<Tensor<T>> vals;
        vals.reserve(parts.size());
        for (int p : parts) vals.push_back(value(p));
        n.value = ops::concat(vals, axis);
        return push(std::move(n));
    }

    int slice(int a, std::size_t axis, std::size_t start, std::size_t len) {
        TapeNode<T> n = make(OpKind::Slice, {a});
        n.axis = axis;
        n.start = start;
        n.value = ops::slice(value(a), axis, start, len);
        return push(std::move(n));
    }

    int transpose(int a, std::vector<std::size_t> perm) {
        TapeNode<T> n = make(OpKind::Transpose, {a});
        n.value = ops::transpose(value(a), perm);
        n.perm = std::move(perm);
        return push(std::move(n));
    }

    int reshape(int a, Shape new_shape) {
        TapeNode<T> n = make(OpKind::Reshape, {a});
        n.prev_shape = value(a).shape();
        n.value = ops::reshape(value(a), std::move(new_shape));
        return push(std::move(n));
    }

    int layernorm(int x, int gain, int bias, double eps) {
        TapeNode<T> n = make(OpKind::LayerNorm, {x, gain, bias});
        n.eps = eps;
        Tensor<T> xhat, inv_std;
        n.value = ops::layernorm(value(x), value(gain), value(bias), eps, &xhat, &inv_std);
        n.saved = {std::move(xhat), std::move(inv_std)};
        return push(std::move(n));
    }

    int softmax(int a) {
        TapeNode<T> n = make(OpKind::Softmax, {a});
        n.value = ops::softmax(value(a));
        return push(std::move(n));
    }

    int gelu(int a) {
        TapeNode<T> n = make(OpKind::Gelu, {a});
        n.value = ops::gelu(value(a));
        return push(std::move(n));
    }

    int l2_normalize(int a, double eps = ops::kNormEps) {
        TapeNode<T> n = make(OpKind::L2Normalize, {a});
        n.eps = eps;
        Tensor<T> norms;
        n.value = ops::l2_normalize(value(a), eps, &norms);
        n.saved = {std::move(norms)};
        return push(std::move(n));
    }

    int scale_shift(int x, int gamma, int beta) {
        TapeNode<T> n = make(OpKind::ScaleShift, {x, gamma, beta});
        n.value = ops::scale_shift(value(x), value(gamma), value(beta));
        return push(std::move(n));
    }

    int sum(int a) {
        TapeNode<T> n = make(OpKind::Sum, {a});
        n.value = ops::sum(value(a));
        return push(std::move(n));
    }

    int cosine_sim(int x, int a, double eps = ops::kNormEps) {
        TapeNode<T> n = make(OpKind::CosineSim, {x, a});
        n.eps = eps;
        Tensor<T> xn, an, xnorm, anorm;
        n.value = ops::cosine_sim_matrix(value(x), value(a), eps, &xn, &an, &xnorm, &anorm);
        n.saved = {std::move(xn), std::move(an), std::move(xnorm), std::move(anorm)};
        return push(std::move(n));
    }

    int class_means(int x, std::vector<int> labels, std::size_t n_classes) {
        TapeNode<T> n = make(OpKind::ClassMeans, {x});
        n.value = ops::class_means(value(x), labels, n_classes);
        n.labels = std::move(labels);
        return push(std::move(n));
    }

    int proxy_anchor_loss(int sims, std::vector<int> labels, const losses::ProxyAnchorParams& p) {
        TapeNode<T> n = make(OpKind::ProxyAnchorLoss, {sims});
        Tensor<T> grad;
        const T l = losses::proxy_anchor_from_sims(value(sims), labels, p, &grad);
        n.value = Tensor<T>::scalar(l);
        n.labels = std::move(labels);
        n.saved = {std::move(grad)};
        return push(std::move(n));
    }

    int softmax_xent(int logits, std::vector<int> labels) {
        TapeNode<T> n = make(OpKind::SoftmaxXent, {logits});
        Tensor<T> grad;
        const T l = losses::softmax_xent(value(logits), labels, &grad);
        n.value = Tensor<T>::scalar(l);
        n.labels = std::move(labels);
        n.saved = {std::move(grad)};
        return push(std::move(n));
    }

    // Reverse pass from a scalar loss node. Adjoints only propagate into
    // inputs that require gradients, so constant subtrees never materialize
    // gradient buffers.
    GradMap<T> backward(int loss_id) const {
        const TapeNode<T>& loss = nodes_.at(loss_id);
        if (!loss.value.is_scalar())
            throw UsageError("backward: loss node must be scalar, got " +
                             shape_str(loss.value.shape()));

        std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
        if (loss.requires_grad) grads[loss_id] = Tensor<T>::full(loss.value.shape(), T(1));

        auto& registry = adjoint_registry<T>();
        for (int id = loss_id; id >= 0; --id) {
            const TapeNode<T>& n = nodes_[id];
            if (!grads[id].has_value()) continue;
            if (n.kind == OpKind::Leaf || n.kind == OpKind::Constant) continue;

            auto it = registry.find(n.kind);
            if (it == registry.end())
                throw Error(std::string("backward: no adjoint registered for op '") +
                            op_name(n.kind) + "'");

            const Tensor<T>& upstream = *grads[id];
            auto accumulate = [&](std::size_t input_idx, Tensor<T>&& g) {
                const int in_id = n.inputs.at(input_idx);
                const TapeNode<T>& in = nodes_[in_id];
                if (!in.requires_grad) return;
                if (!g.all_finite())
                    throw NumericalError(std::string("backward: non-finite adjoint from op '") +
                                         op_name(n.kind) + "'");
                if (!grads[in_id].has_value()) {
                    grads[in_id] = std::move(g);
                } else {
                    Tensor<T>& acc = *grads[in_id];
                    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
                }
            };
            it->second(*this, n, upstream, accumulate);
        }

        GradMap<T> result;
        for (int leaf_id : leaves_) {
            if (grads[leaf_id].has_value())
                result.grads.emplace(leaf_id, std::move(*grads[leaf_id]));
            else
                result.grads.emplace(leaf_id, Tensor<T>(nodes_[leaf_id].value.shape()));
        }
        return result;
    }

private:
    TapeNode<T> make(OpKind kind, std::vector<int> inputs) {
        TapeNode<T> n;
        n.kind = kind;
        for (int i : inputs) n.requires_grad = n.requires_grad || nodes_.at(i).requires_grad;
        n.inputs = std::move(inputs);
        return n;
    }

    int push(TapeNode<T>&& n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::vector<TapeNode<T>> nodes_;
    std::vector<int> leaves_;
};

}  // namespace dipa

#include "dipa/tape_adjoints.hpp"
