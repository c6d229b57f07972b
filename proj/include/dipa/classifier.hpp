#pragma once

#include <limits>
#include <vector>

#include "dipa/ops.hpp"
#include "dipa/tensor.hpp"

namespace dipa {

enum class CentroidSource { Mean, Anchor };

template <typename T>
struct CentroidSet {
    Tensor<T> centroids;  // [N x D]
    CentroidSource source = CentroidSource::Mean;

    std::size_t n_classes() const { return centroids.dim(0); }
};

// Cluster-quality diagnostics under cosine distance 1 - s.
struct ClusterReport {
    double intra_cluster = 0.0;  // mean over samples of mean distance to same-class samples
    double inter_cluster = 0.0;  // mean pairwise distance between class centroids
    double silhouette = 0.0;     // mean (b - a) / max(a, b); singleton samples contribute 0
};

template <typename T>
CentroidSet<T> compute_centroids(const Tensor<T>& support_embeddings,
                                 const std::vector<int>& labels, std::size_t n_classes) {
    return CentroidSet<T>{ops::class_means(support_embeddings, labels, n_classes),
                          CentroidSource::Mean};
}

// Anchor-centroid inference: anchors stand in for class means, unmodified.
template <typename T>
CentroidSet<T> centroids_from_anchors(const Tensor<T>& anchors) {
    if (anchors.rank() != 2) throw ShapeError("centroids_from_anchors: need [N x D]");
    return CentroidSet<T>{anchors, CentroidSource::Anchor};
}

// argmax_n s(q, c_n), ties broken by lowest class index.
template <typename T>
std::vector<int> classify(const Tensor<T>& query_embeddings, const CentroidSet<T>& centroids) {
    const Tensor<T> sims = ops::cosine_sim_matrix(query_embeddings, centroids.centroids);
    const std::size_t q = sims.dim(0), n = sims.dim(1);
    std::vector<int> out(q);
    for (std::size_t i = 0; i < q; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (sims.at(i, j) > sims.at(i, best)) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

template <typename T>
double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size() || predictions.empty())
        throw UsageError("accuracy: prediction/label size mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

template <typename T>
ClusterReport cluster_metrics(const Tensor<T>& embeddings, const std::vector<int>& labels) {
    if (embeddings.rank() != 2 || labels.size() != embeddings.dim(0))
        throw ShapeError("cluster_metrics: need [M x D] with one label per row");
    const std::size_t m = embeddings.dim(0);
    std::size_t n_classes = 0;
    for (int y : labels) {
        if (y < 0) throw DataError("cluster_metrics: negative label");
        n_classes = std::max(n_classes, static_cast<std::size_t>(y) + 1);
    }
    if (n_classes < 2) throw DataError("cluster_metrics: need at least 2 classes");

    std::vector<std::size_t> counts(n_classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    for (std::size_t c = 0; c < n_classes; ++c)
        if (counts[c] == 0) throw DataError("cluster_metrics: class " + std::to_string(c) +
                                            " has no samples");

    // pairwise cosine distances
    const Tensor<T> sims = ops::cosine_sim_matrix(embeddings, embeddings);
    auto dist = [&](std::size_t i, std::size_t j) {
        return 1.0 - static_cast<double>(sims.at(i, j));
    };

    ClusterReport report;

    // intra: per sample, mean distance to the other same-class samples.
    double intra_sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const auto yi = static_cast<std::size_t>(labels[i]);
        if (counts[yi] < 2) continue;  // singleton contributes 0
        double d = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            if (j != i && static_cast<std::size_t>(labels[j]) == yi) d += dist(i, j);
        intra_sum += d / static_cast<double>(counts[yi] - 1);
    }
    report.intra_cluster = intra_sum / static_cast<double>(m);

    // inter: mean pairwise distance between class centroids.
    const Tensor<T> centroids = ops::class_means(embeddings, labels, n_classes);
    const Tensor<T> csims = ops::cosine_sim_matrix(centroids, centroids);
    double inter_sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < n_classes; ++a)
        for (std::size_t b = a + 1; b < n_classes; ++b) {
            inter_sum += 1.0 - static_cast<double>(csims.at(a, b));
            ++pairs;
        }
    report.inter_cluster = inter_sum / static_cast<double>(pairs);

    // silhouette: a = mean same-class distance, b = min over other classes of
    // mean distance to that class; singleton samples contribute 0.
    double sil_sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const auto yi = static_cast<std::size_t>(labels[i]);
        if (counts[yi] < 2) continue;
        double a = 0.0;
        std::vector<double> per_class(n_classes, 0.0);
        for (std::size_t j = 0; j < m; ++j) {
            if (j == i) continue;
            per_class[static_cast<std::size_t>(labels[j])] += dist(i, j);
        }
        a = per_class[yi] / static_cast<double>(counts[yi] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < n_classes; ++c) {
            if (c == yi) continue;
            b = std::min(b, per_class[c] / static_cast<double>(counts[c]));
        }
        const double denom = std::max(a, b);
        if (denom > 0.0) sil_sum += (b - a) / denom;
    }
    report.silhouette = sil_sum / static_cast<double>(m);
    return report;
}

}  // namespace dipa
