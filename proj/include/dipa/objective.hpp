#pragma once

#include <vector>

#include "dipa/losses.hpp"
#include "dipa/ops.hpp"
#include "dipa/rng.hpp"
#include "dipa/tape.hpp"
#include "dipa/tensor.hpp"

namespace dipa {

using LossParams = losses::ProxyAnchorParams;

enum class AnchorInitMode { Random, Custom };

// One learnable anchor vector per support class, in fused-feature space.
// Row n is the anchor of class n.
template <typename T>
struct AnchorSet {
    Tensor<T> anchors;  // [N x D]

    std::size_t n_classes() const { return anchors.dim(0); }
    std::size_t feature_dim() const { return anchors.dim(1); }
};

// Random init: seeded N(0,1). Custom init: class means of the (frozen,
// unadapted) support embeddings, computed once by the caller.
template <typename T>
AnchorSet<T> init_anchors(std::size_t n_classes, std::size_t feature_dim, Rng& rng) {
    Tensor<T> a(Shape{n_classes, feature_dim});
    for (auto& v : a.data()) v = static_cast<T>(rng.normal());
    return AnchorSet<T>{std::move(a)};
}

template <typename T>
AnchorSet<T> init_anchors_custom(const Tensor<T>& support_embeddings,
                                 const std::vector<int>& labels, std::size_t n_classes) {
    return AnchorSet<T>{ops::class_means(support_embeddings, labels, n_classes)};
}

// Direct (tape-free) evaluation of the proxy anchor loss; the training loop
// uses the tape composition below instead.
template <typename T>
T proxy_anchor_loss(const Tensor<T>& embeddings, const std::vector<int>& labels,
                    const AnchorSet<T>& anchors, const LossParams& params) {
    const Tensor<T> sims = ops::cosine_sim_matrix(embeddings, anchors.anchors);
    return losses::proxy_anchor_from_sims(sims, labels, params);
}

// Mean-centroid NCC loss (ablation baseline): prototypical cross entropy over
// cosine similarity to class means recomputed from the current embeddings.
template <typename T>
T ncc_loss(const Tensor<T>& embeddings, const std::vector<int>& labels, std::size_t n_classes,
           double tau = 10.0) {
    const Tensor<T> centroids = ops::class_means(embeddings, labels, n_classes);
    const Tensor<T> logits =
        ops::scalar_mul(ops::cosine_sim_matrix(embeddings, centroids), tau);
    return losses::softmax_xent(logits, labels);
}

// Tape composition: embeddings node -> scalar loss node.
template <typename T>
int proxy_anchor_loss_node(Tape<T>& tape, int embeddings, int anchors,
                           const std::vector<int>& labels, const LossParams& params) {
    const int sims = tape.cosine_sim(embeddings, anchors);
    return tape.proxy_anchor_loss(sims, labels, params);
}

template <typename T>
int ncc_loss_node(Tape<T>& tape, int embeddings, const std::vector<int>& labels,
                  std::size_t n_classes, double tau = 10.0) {
    const int centroids = tape.class_means(embeddings, labels, n_classes);
    const int logits = tape.scalar_mul(tape.cosine_sim(embeddings, centroids), tau);
    return tape.softmax_xent(logits, labels);
}

}  // namespace dipa
