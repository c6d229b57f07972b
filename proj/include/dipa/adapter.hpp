#pragma once

#include <array>
#include <string>
#include <vector>

#include "dipa/rng.hpp"
#include "dipa/tensor.hpp"
#include "dipa/weights.hpp"

namespace dipa {

enum class AdapterInitMode { Constant, Normal };

// Scale/shift attachment sites inside one transformer block, in forward
// order. Feature dims per site are {e, e, e, h, h, e}.
inline constexpr std::size_t kAdapterSites = 6;
inline constexpr const char* kSiteNames[kAdapterSites] = {"post_ln1", "post_attn", "post_ln2",
                                                          "post_fc1", "post_gelu", "post_fc2"};

inline std::array<std::size_t, kAdapterSites> adapter_site_dims(const BackboneConfig& cfg) {
    const std::size_t e = cfg.embed_dim, h = cfg.hidden_dim();
    return {e, e, e, h, h, e};
}

template <typename T>
struct AdapterPair {
    Tensor<T> gamma;
    Tensor<T> beta;
};

// The task-specific parameter set h_psi: six (gamma, beta) pairs for each of
// the top d_t blocks. d_t = 0 is the frozen-backbone baseline (empty set).
template <typename T>
struct AdapterSet {
    std::size_t backbone_depth = 0;  // L
    std::size_t d_t = 0;
    // layers[0] corresponds to block (L - d_t), zero-based.
    std::vector<std::array<AdapterPair<T>, kAdapterSites>> layers;

    std::size_t first_block() const { return backbone_depth - d_t; }
    bool covers_block(std::size_t block) const { return d_t > 0 && block >= first_block(); }

    const std::array<AdapterPair<T>, kAdapterSites>& for_block(std::size_t block) const {
        if (!covers_block(block)) throw UsageError("AdapterSet: block has no adapters");
        return layers[block - first_block()];
    }
    std::array<AdapterPair<T>, kAdapterSites>& for_block(std::size_t block) {
        if (!covers_block(block)) throw UsageError("AdapterSet: block has no adapters");
        return layers[block - first_block()];
    }

    // Exhaustive enumeration; must equal 2 * d_t * (4e + 2h).
    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& layer : layers)
            for (const auto& pair : layer) n += pair.gamma.size() + pair.beta.size();
        return n;
    }
};

// Closed form for the adapter parameter count.
inline std::size_t adapter_param_formula(std::size_t d_t, std::size_t embed_dim,
                                         std::size_t hidden_dim) {
    return 2 * d_t * (4 * embed_dim + 2 * hidden_dim);
}

// Build the adapter set for tuning depth d_t. Constant init (gamma=1, beta=0)
// keeps the forward pass bit-identical to the unadapted backbone; Normal init
// draws gamma ~ N(1, sigma^2), beta ~ N(0, sigma^2).
template <typename T>
AdapterSet<T> attach_adapters(const BackboneConfig& cfg, std::size_t d_t, AdapterInitMode mode,
                              double sigma = 0.02, Rng* rng = nullptr) {
    cfg.validate();
    if (d_t > cfg.depth)
        throw UsageError("attach_adapters: d_t=" + std::to_string(d_t) + " exceeds depth " +
                         std::to_string(cfg.depth));
    if (mode == AdapterInitMode::Normal && rng == nullptr)
        throw UsageError("attach_adapters: Normal init requires an Rng");

    const auto dims = adapter_site_dims(cfg);
    AdapterSet<T> set;
    set.backbone_depth = cfg.depth;
    set.d_t = d_t;
    set.layers.resize(d_t);
    for (auto& layer : set.layers) {
        for (std::size_t s = 0; s < kAdapterSites; ++s) {
            Tensor<T> gamma = Tensor<T>::full(Shape{dims[s]}, T(1));
            Tensor<T> beta(Shape{dims[s]});
            if (mode == AdapterInitMode::Normal) {
                for (auto& v : gamma.data()) v = static_cast<T>(rng->normal(1.0, sigma));
                for (auto& v : beta.data()) v = static_cast<T>(rng->normal(0.0, sigma));
            }
            layer[s] = AdapterPair<T>{std::move(gamma), std::move(beta)};
        }
    }
    return set;
}

struct ParamReport {
    std::size_t adapter_params = 0;
    std::size_t anchor_params = 0;
    std::size_t total = 0;
    std::size_t backbone_params = 0;
    double ratio_over_backbone = 0.0;
};

/// Trainable-parameter accounting: adapters, anchors (N * d_f * e), and the
// ratio over the frozen backbone total.
inline ParamReport count_params(const BackboneConfig& cfg, std::size_t d_t, std::size_t n_way,
                                std::size_t d_f) {
    ParamReport r;
    r.adapter_params = adapter_param_formula(d_t, cfg.embed_dim, cfg.hidden_dim());
    r.anchor_params = n_way * d_f * cfg.embed_dim;
    r.total = r.adapter_params + r.anchor_params;
    std::size_t backbone = 0;
    for (const auto& [name, shape] : expected_weights(cfg)) backbone += shape_numel(shape);
    r.backbone_params = backbone;
    r.ratio_over_backbone = static_cast<double>(r.total) / static_cast<double>(backbone);
    return r;
}

// Serialization into a DIPAW1 container under ssf.{j}.{site}.gamma/.beta,
// where j is the 1-based block number (L - d_t + 1 .. L).
template <typename T>
void adapters_to_container(const AdapterSet<T>& set, WeightContainer& w) {
    for (std::size_t li = 0; li < set.layers.size(); ++li) {
        const std::size_t j = set.first_block() + li + 1;
        for (std::size_t s = 0; s < kAdapterSites; ++s) {
            const std::string base = "ssf." + std::to_string(j) + "." + kSiteNames[s] + ".";
            w.set(base + "gamma", set.layers[li][s].gamma);
            w.set(base + "beta", set.layers[li][s].beta);
        }
    }
}

template <typename T>
AdapterSet<T> adapters_from_container(const WeightContainer& w, const BackboneConfig& cfg,
                                      std::size_t d_t) {
    AdapterSet<T> set = attach_adapters<T>(cfg, d_t, AdapterInitMode::Constant);
    for (std::size_t li = 0; li < set.layers.size(); ++li) {
        const std::size_t j = set.first_block() + li + 1;
        for (std::size_t s = 0; s < kAdapterSites; ++s) {
            const std::string base = "ssf." + std::to_string(j) + "." + kSiteNames[s] + ".";
            set.layers[li][s].gamma = w.get<T>(base + "gamma");
            set.layers[li][s].beta = w.get<T>(base + "beta");
        }
    }
    return set;
}

}  // namespace dipa
