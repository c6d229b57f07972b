#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dipa/adapter.hpp"
#include "dipa/backbone.hpp"
#include "dipa/objective.hpp"
#include "dipa/tape.hpp"
#include "dipa/weights.hpp"

namespace dipa {

// ---------------------------------------------------------------------------
// NAdam (Nesterov-accelerated Adam), Dozat 2016. Closed form per step t
// (1-based), with momentum schedule mu_t = beta1 * (1 - 0.5 * 0.96^(t*psi)):
//   m_t = beta1 * m_{t-1} + (1 - beta1) * g
//   v_t = beta2 * v_{t-1} + (1 - beta2) * g^2
//   m_hat = mu_{t+1} * m_t / (1 - prod_{i<=t+1} mu_i)
//         + (1 - mu_t) * g / (1 - prod_{i<=t} mu_i)
//   v_hat = v_t / (1 - beta2^t)
//   theta -= lr * m_hat / (sqrt(v_hat) + eps)
// ---------------------------------------------------------------------------

struct NAdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double momentum_decay = 0.004;  // psi
};

template <typename T>
struct NAdamState {
    Tensor<T> m;
    Tensor<T> v;
    std::size_t step = 0;
    double mu_product = 1.0;  // prod_{i<=step} mu_i
};

template <typename T>
void nadam_step(Tensor<T>& param, const Tensor<T>& grad, NAdamState<T>& state, double lr,
                const NAdamConfig& cfg = {}) {
    if (!param.same_shape(grad))
        throw ShapeError("nadam_step: grad shape " + shape_str(grad.shape()) +
                         " does not match param " + shape_str(param.shape()));
    if (!grad.all_finite()) throw NumericalError("nadam_step: non-finite gradient");
    if (state.step == 0) {
        state.m = Tensor<T>(param.shape());
        state.v = Tensor<T>(param.shape());
    }

    const double t = static_cast<double>(++state.step);
    const double mu_t = cfg.beta1 * (1.0 - 0.5 * std::pow(0.96, t * cfg.momentum_decay));
    const double mu_next = cfg.beta1 * (1.0 - 0.5 * std::pow(0.96, (t + 1.0) * cfg.momentum_decay));
    state.mu_product *= mu_t;
    const double mu_product_next = state.mu_product * mu_next;
    const double bias_v = 1.0 - std::pow(cfg.beta2, t);

    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        const double m = cfg.beta1 * static_cast<double>(state.m[i]) + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * static_cast<double>(state.v[i]) + (1.0 - cfg.beta2) * g * g;
        state.m[i] = static_cast<T>(m);
        state.v[i] = static_cast<T>(v);
        const double m_hat =
            mu_next * m / (1.0 - mu_product_next) + (1.0 - mu_t) * g / (1.0 - state.mu_product);
        const double v_hat = v / bias_v;
        param[i] = static_cast<T>(static_cast<double>(param[i]) -
                                  lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
    check_finite(param, "nadam_step");
}

// ---------------------------------------------------------------------------
// Fine-tuning loop
// ---------------------------------------------------------------------------

enum class LossKind { ProxyAnchor, NccMean };
enum class InferenceKind { NccMean, NccAnchor };

struct FinetuneConfig {
    std::size_t iterations = 80;
    double lr_adapters = 0.005;
    double lr_anchors = 5.0;
    LossKind loss = LossKind::ProxyAnchor;
    std::size_t d_t = 7;
    std::size_t d_f = 4;
    AdapterInitMode adapter_init = AdapterInitMode::Constant;
    double adapter_init_sigma = 0.02;
    AnchorInitMode anchor_init = AnchorInitMode::Random;
    LossParams loss_params{};  // margin delta, scale alpha
    double ncc_tau = 10.0;
    std::uint64_t seed = 0;
    bool use_prefix_cache = true;
    NAdamConfig nadam{};

    void validate(const BackboneConfig& backbone) const {
        if (iterations < 1) throw UsageError("FinetuneConfig: iterations must be >= 1");
        if (lr_adapters < 0 || lr_anchors < 0)
            throw UsageError("FinetuneConfig: learning rates must be non-negative");
        if (d_t > backbone.depth) throw UsageError("FinetuneConfig: d_t exceeds backbone depth");
        if (d_f < 1 || d_f > backbone.depth)
            throw UsageError("FinetuneConfig: d_f out of range [1, depth]");
        if (!(loss_params.scale > 0)) throw UsageError("FinetuneConfig: alpha must be positive");
        if (loss_params.margin < 0) throw UsageError("FinetuneConfig: delta must be >= 0");
    }
};

// Support-set activations at the frozen/trainable boundary, computed once and
// replayed every iteration. frozen_cls holds the [cls] outputs of all blocks
// below the boundary so fusion can reach below the tuning depth.
template <typename T>
struct PrefixCache {
    Tensor<T> tokens;  // [M x Tk x e] entering block `boundary`
    std::vector<Tensor<T>> frozen_cls;
    std::size_t boundary = 0;  // first trainable block index (L - d_t)

    std::size_t memory_bytes() const {
        std::size_t n = tokens.size();
        for (const auto& t : frozen_cls) n += t.size();
        return n * sizeof(T);
    }
};

template <typename T>
PrefixCache<T> build_prefix_cache(const BackboneConfig& cfg, const WeightContainer& w,
                                  const Tensor<T>& images, std::size_t d_t) {
    if (d_t > cfg.depth) throw UsageError("build_prefix_cache: d_t exceeds backbone depth");
    PrefixCache<T> cache;
    cache.boundary = cfg.depth - d_t;

    Tape<T> tape;
    int tokens = tape.constant(embed_images(cfg, w, images));
    for (std::size_t block = 0; block < cache.boundary; ++block) {
        const BlockParamIds ids = load_block_constants(tape, w, block);
        tokens = run_block_on_tape(tape, tokens, ids, nullptr, cfg);
        cache.frozen_cls.push_back(tape.value(extract_cls(tape, tokens)));
    }
    // With an empty trainable suffix (d_t = 0) the final-norm variant of z_L
    // must come from the cache as well.
    if (cache.boundary == cfg.depth && cfg.fuse_final_norm) {
        const int normed =
            tape.layernorm(tokens, tape.constant(w.template get<T>("final_norm.gain")),
                           tape.constant(w.template get<T>("final_norm.bias")), cfg.ln_eps);
        cache.frozen_cls.back() = tape.value(extract_cls(tape, normed));
    }
    cache.tokens = tape.value(tokens);
    return cache;
}

// Replay the trainable suffix from a cache and return the fused-feature node
// [M x (d_f * e)]. `adapter_ids` has one entry per adapted layer (topmost d_t
// blocks, in block order); pass empty to run the suffix without adapters.
template <typename T>
int run_suffix_on_tape(Tape<T>& tape, const BackboneConfig& cfg, const WeightContainer& w,
                       const PrefixCache<T>& cache, int boundary_tokens,
                       const std::vector<AdapterNodeIds>& adapter_ids, std::size_t d_t,
                       std::size_t d_f) {
    const std::size_t first_adapted = cfg.depth - d_t;
    std::vector<int> suffix_cls(cfg.depth, -1);
    int tokens = boundary_tokens;
    for (std::size_t block = cache.boundary; block < cfg.depth; ++block) {
        const BlockParamIds ids = load_block_constants(tape, w, block);
        const AdapterNodeIds* ad = nullptr;
        if (d_t > 0 && block >= first_adapted && !adapter_ids.empty())
            ad = &adapter_ids[block - first_adapted];
        try {
            tokens = run_block_on_tape(tape, tokens, ids, ad, cfg);
        } catch (const NumericalError& e) {
            throw NumericalError("suffix forward: block " + std::to_string(block) + ": " +
                                 e.what());
        }
        suffix_cls[block] = extract_cls(tape, tokens);
    }

    if (cfg.fuse_final_norm && cfg.depth > cache.boundary) {
        const int normed =
            tape.layernorm(tokens, tape.constant(w.template get<T>("final_norm.gain")),
                           tape.constant(w.template get<T>("final_norm.bias")), cfg.ln_eps);
        suffix_cls[cfg.depth - 1] = extract_cls(tape, normed);
    }

    std::vector<int> parts;
    parts.reserve(d_f);
    for (std::size_t i = 0; i < d_f; ++i) {
        const std::size_t layer = cfg.depth - 1 - i;
        if (layer >= cache.boundary)
            parts.push_back(suffix_cls[layer]);
        else
            parts.push_back(tape.constant(cache.frozen_cls[layer]));
    }
    return tape.concat(parts, 1);
}

// Fused embeddings for a batch of images through the full (optionally
// adapted) encoder. Inference-path convenience built on `forward`.
template <typename T>
Tensor<T> fused_embeddings(const BackboneConfig& cfg, const WeightContainer& w,
                           const AdapterSet<T>* adapters, const Tensor<T>& images,
                           std::size_t d_f) {
    return fuse_features(forward(cfg, w, adapters, images), d_f);
}

template <typename T>
struct FinetuneResult {
    AdapterSet<T> adapters;
    AnchorSet<T> anchors;
    std::vector<double> loss_trace;
    std::size_t cache_bytes = 0;
};

// The meta-testing fine-tuning loop: full-support-batch steps, dual NAdam
// optimizers (one over h_psi, one over A_phi), fixed iteration count.
template <typename T>
FinetuneResult<T> finetune(const BackboneConfig& cfg, const WeightContainer& w,
                           const FinetuneConfig& ft, const Tensor<T>& support_images,
                           const std::vector<int>& support_labels) {
    cfg.validate();
    ft.validate(cfg);
    if (support_labels.empty() || support_images.dim(0) != support_labels.size())
        throw UsageError("finetune: support set empty or label count mismatch");

    std::size_t n_way = 0;
    for (int y : support_labels) {
        if (y < 0) throw DataError("finetune: negative label");
        n_way = std::max(n_way, static_cast<std::size_t>(y) + 1);
    }
    std::vector<std::size_t> counts(n_way, 0);
    for (int y : support_labels) ++counts[static_cast<std::size_t>(y)];
    for (std::size_t c = 0; c < n_way; ++c)
        if (counts[c] == 0)
            throw DataError("finetune: class " + std::to_string(c) + " absent from support");

    Rng rng(ft.seed);
    const std::size_t feature_dim = ft.d_f * cfg.embed_dim;

    FinetuneResult<T> result;
    result.adapters = attach_adapters<T>(cfg, ft.d_t, ft.adapter_init, ft.adapter_init_sigma,
                                         &rng);

    // The cache is built either at the true boundary (L - d_t) or, in the
    // uncached reference mode, right after patch embedding so every frozen
    // block is recomputed on the tape each iteration.
    const PrefixCache<T> cache =
        build_prefix_cache(cfg, w, support_images, ft.use_prefix_cache ? ft.d_t : cfg.depth);
    result.cache_bytes = cache.memory_bytes();

    if (ft.anchor_init == AnchorInitMode::Random) {
        result.anchors = init_anchors<T>(n_way, feature_dim, rng);
    } else {
        // Custom init: class means of the frozen, unadapted support embeddings.
        Tape<T> tape;
        const int tokens = tape.constant(cache.tokens);
        const int fused = run_suffix_on_tape(tape, cfg, w, cache, tokens, {}, ft.d_t, ft.d_f);
        result.anchors = init_anchors_custom(tape.value(fused), support_labels, n_way);
    }

    const bool train_anchors = ft.loss == LossKind::ProxyAnchor;

    // Flat parameter list: adapter tensors first, then anchors.
    std::vector<Tensor<T>*> params;
    std::vector<double> lrs;
    for (auto& layer : result.adapters.layers)
        for (auto& pair : layer) {
            params.push_back(&pair.gamma);
            lrs.push_back(ft.lr_adapters);
            params.push_back(&pair.beta);
            lrs.push_back(ft.lr_adapters);
        }
    if (train_anchors) {
        params.push_back(&result.anchors.anchors);
        lrs.push_back(ft.lr_anchors);
    }
    std::vector<NAdamState<T>> states(params.size());

    result.loss_trace.reserve(ft.iterations);
    for (std::size_t it = 0; it < ft.iterations; ++it) {
        try {
            Tape<T> tape;
            std::vector<int> leaf_ids;
            leaf_ids.reserve(params.size());

            std::vector<AdapterNodeIds> adapter_ids;
            adapter_ids.reserve(result.adapters.layers.size());
            for (const auto& layer : result.adapters.layers) {
                AdapterNodeIds ids = adapter_layer_to_tape<T>(tape, layer, true);
                for (const auto& [g, b] : ids.sites) {
                    leaf_ids.push_back(g);
                    leaf_ids.push_back(b);
                }
                adapter_ids.push_back(ids);
            }

            const int tokens = tape.constant(cache.tokens);
            const int fused =
                run_suffix_on_tape(tape, cfg, w, cache, tokens, adapter_ids, ft.d_t, ft.d_f);

            int loss;
            if (ft.loss == LossKind::ProxyAnchor) {
                const int anchors = tape.leaf(result.anchors.anchors);
                leaf_ids.push_back(anchors);
                loss = proxy_anchor_loss_node(tape, fused, anchors, support_labels,
                                              ft.loss_params);
            } else {
                loss = ncc_loss_node(tape, fused, support_labels, n_way, ft.ncc_tau);
            }

            const double loss_value = static_cast<double>(tape.value(loss).item());
            result.loss_trace.push_back(loss_value);

            const GradMap<T> grads = tape.backward(loss);
            for (std::size_t p = 0; p < params.size(); ++p)
                nadam_step(*params[p], grads.at(leaf_ids[p]), states[p], lrs[p], ft.nadam);
        } catch (const NumericalError& e) {
            throw NumericalError("finetune: iteration " + std::to_string(it) + ": " + e.what());
        }
    }
    return result;
}

}  // namespace dipa
