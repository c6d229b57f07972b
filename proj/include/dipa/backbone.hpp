#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dipa/adapter.hpp"
#include "dipa/ops.hpp"
#include "dipa/tape.hpp"
#include "dipa/tensor.hpp"
#include "dipa/weights.hpp"

namespace dipa {

// Per-layer [cls] outputs (post-block, post-adapter) plus the final-norm
// token sequence. When cfg.fuse_final_norm is set, the last entry of
// cls_per_layer is taken after the final pre-head layernorm.
template <typename T>
struct LayerOutputs {
    std::vector<Tensor<T>> cls_per_layer;  // length L, each [B x e]
    Tensor<T> final_tokens;                // [B x Tk x e]
};

// Patch embedding as unfold + matmul, plus [cls] token and learned positional
// embedding. Pure function of frozen weights, so it never lives on a tape.
template <typename T>
Tensor<T> embed_images(const BackboneConfig& cfg, const WeightContainer& w,
                       const Tensor<T>& images) {
    cfg.validate();
    const std::size_t ps = cfg.patch_size, c = cfg.channels;
    const std::size_t side = cfg.patches_per_side();
    if (images.rank() != 4 || images.dim(1) != c || images.dim(2) != cfg.image_size ||
        images.dim(3) != cfg.image_size)
        throw ShapeError("embed_images: expected [B x " + std::to_string(c) + " x " +
                         std::to_string(cfg.image_size) + " x " + std::to_string(cfg.image_size) +
                         "], got " + shape_str(images.shape()));

    const std::size_t b = images.dim(0);
    const std::size_t patch_dim = c * ps * ps;
    Tensor<T> patches(Shape{b, cfg.n_patches(), patch_dim});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t pr = 0; pr < side; ++pr)
            for (std::size_t pc = 0; pc < side; ++pc) {
                const std::size_t patch = pr * side + pc;
                T* dst = patches.data().data() + (bi * cfg.n_patches() + patch) * patch_dim;
                std::size_t k = 0;
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t py = 0; py < ps; ++py)
                        for (std::size_t px = 0; px < ps; ++px)
                            dst[k++] = images[((bi * c + ch) * cfg.image_size + pr * ps + py) *
                                                  cfg.image_size +
                                              pc * ps + px];
            }

    Tensor<T> tokens_patch = ops::add(ops::matmul(patches, w.get<T>("patch_embed.weight")),
                                      w.get<T>("patch_embed.bias"));

    const Tensor<T> cls = w.get<T>("cls_token");
    Tensor<T> cls_batch(Shape{b, 1, cfg.embed_dim});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t j = 0; j < cfg.embed_dim; ++j)
            cls_batch[bi * cfg.embed_dim + j] = cls[j];

    Tensor<T> tokens = ops::concat<T>({cls_batch, tokens_patch}, 1);

    const Tensor<T> pos = w.get<T>("pos_embed");
    if (pos.shape() != Shape{cfg.n_tokens(), cfg.embed_dim})
        throw ShapeError("embed_images: pos_embed shape mismatch");
    const std::size_t tk = cfg.n_tokens(), e = cfg.embed_dim;
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < tk * e; ++i) tokens[bi * tk * e + i] += pos[i];
    check_finite(tokens, "embed_images");
    return tokens;
}

// Tape node ids of one block's frozen weights.
struct BlockParamIds {
    int ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    int ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
BlockParamIds load_block_constants(Tape<T>& tape, const WeightContainer& w, std::size_t block) {
    const std::string p = "blocks." + std::to_string(block) + ".";
    return BlockParamIds{
        tape.constant(w.template get<T>(p + "ln1.gain")),
        tape.constant(w.template get<T>(p + "ln1.bias")),
        tape.constant(w.template get<T>(p + "attn.qkv.weight")),
        tape.constant(w.template get<T>(p + "attn.qkv.bias")),
        tape.constant(w.template get<T>(p + "attn.proj.weight")),
        tape.constant(w.template get<T>(p + "attn.proj.bias")),
        tape.constant(w.template get<T>(p + "ln2.gain")),
        tape.constant(w.template get<T>(p + "ln2.bias")),
        tape.constant(w.template get<T>(p + "mlp.fc1.weight")),
        tape.constant(w.template get<T>(p + "mlp.fc1.bias")),
        tape.constant(w.template get<T>(p + "mlp.fc2.weight")),
        tape.constant(w.template get<T>(p + "mlp.fc2.bias")),
    };
}

// Tape node ids of one block's six (gamma, beta) adapter pairs.
struct AdapterNodeIds {
    std::array<std::pair<int, int>, kAdapterSites> sites;
};

// Put one adapted layer's parameters on the tape, as leaves (training) or
// constants (inference).
template <typename T>
AdapterNodeIds adapter_layer_to_tape(Tape<T>& tape,
                                     const std::array<AdapterPair<T>, kAdapterSites>& layer,
                                     bool trainable) {
    AdapterNodeIds ids;
    for (std::size_t s = 0; s < kAdapterSites; ++s) {
        if (trainable)
            ids.sites[s] = {tape.leaf(layer[s].gamma), tape.leaf(layer[s].beta)};
        else
            ids.sites[s] = {tape.constant(layer[s].gamma), tape.constant(layer[s].beta)};
    }
    return ids;
}

// One pre-norm transformer block on the tape. `adapters` may be null (frozen
// block). Returns the output token node; `tokens` is [B x Tk x e].
template <typename T>
int run_block_on_tape(Tape<T>& tape, int tokens, const BlockParamIds& w,
                      const AdapterNodeIds* adapters, const BackboneConfig& cfg) {
    const Shape& in_shape = tape.value(tokens).shape();
    const std::size_t b = in_shape[0], tk = in_shape[1], e = cfg.embed_dim;
    const std::size_t heads = cfg.heads, dh = cfg.head_dim();

    auto site = [&](int x, std::size_t s) {
        if (!adapters) return x;
        return tape.scale_shift(x, adapters->sites[s].first, adapters->sites[s].second);
    };

    // attention sub-block
    int h = tape.layernorm(tokens, w.ln1_g, w.ln1_b, cfg.ln_eps);
    h = site(h, 0);  // post_ln1
    int qkv = tape.add(tape.matmul(h, w.qkv_w), w.qkv_b);
    int q = tape.slice(qkv, 2, 0, e);
    int k = tape.slice(qkv, 2, e, e);
    int v = tape.slice(qkv, 2, 2 * e, e);
    q = tape.transpose(tape.reshape(q, {b, tk, heads, dh}), {0, 2, 1, 3});
    k = tape.transpose(tape.reshape(k, {b, tk, heads, dh}), {0, 2, 1, 3});
    v = tape.transpose(tape.reshape(v, {b, tk, heads, dh}), {0, 2, 1, 3});
    int scores = tape.scalar_mul(tape.matmul(q, tape.transpose(k, {0, 1, 3, 2})),
                                 1.0 / std::sqrt(static_cast<double>(dh)));
    int attn = tape.softmax(scores);
    int ctx = tape.reshape(tape.transpose(tape.matmul(attn, v), {0, 2, 1, 3}), {b, tk, e});
    int proj = tape.add(tape.matmul(ctx, w.proj_w), w.proj_b);
    proj = site(proj, 1);  // post_attn
    tokens = tape.add(tokens, proj);

    // MLP sub-block
    int h2 = tape.layernorm(tokens, w.ln2_g, w.ln2_b, cfg.ln_eps);
    h2 = site(h2, 2);  // post_ln2
    int f1 = tape.add(tape.matmul(h2, w.fc1_w), w.fc1_b);
    f1 = site(f1, 3);  // post_fc1
    int g = tape.gelu(f1);
    g = site(g, 4);  // post_gelu
    int f2 = tape.add(tape.matmul(g, w.fc2_w), w.fc2_b);
    f2 = site(f2, 5);  // post_fc2
    return tape.add(tokens, f2);
}

// [cls] token of a [B x Tk x e] node as [B x e].
template <typename T>
int extract_cls(Tape<T>& tape, int tokens) {
    const Shape& s = tape.value(tokens).shape();
    return tape.reshape(tape.slice(tokens, 1, 0, 1), {s[0], s[2]});
}

// Full encoder forward. Internally records a constants-only tape so block
// math exists exactly once; nothing is differentiated here.
template <typename T>
LayerOutputs<T> forward(const BackboneConfig& cfg, const WeightContainer& w,
                        const AdapterSet<T>* adapters, const Tensor<T>& images) {
    if (adapters && adapters->d_t > cfg.depth)
        throw UsageError("forward: adapter depth exceeds backbone depth");

    Tape<T> tape;
    int tokens = tape.constant(embed_images(cfg, w, images));

    LayerOutputs<T> out;
    out.cls_per_layer.reserve(cfg.depth);
    for (std::size_t block = 0; block < cfg.depth; ++block) {
        const BlockParamIds ids = load_block_constants(tape, w, block);
        AdapterNodeIds ad_ids;
        const bool adapted = adapters && adapters->covers_block(block);
        if (adapted)
            ad_ids = adapter_layer_to_tape<T>(tape, adapters->for_block(block), false);
        try {
            tokens = run_block_on_tape(tape, tokens, ids, adapted ? &ad_ids : nullptr, cfg);
        } catch (const NumericalError& e) {
            throw NumericalError("forward: block " + std::to_string(block) + ": " + e.what());
        }
        out.cls_per_layer.push_back(tape.value(extract_cls(tape, tokens)));
    }

    const int normed = tape.layernorm(tokens, tape.constant(w.get<T>("final_norm.gain")),
                                      tape.constant(w.get<T>("final_norm.bias")), cfg.ln_eps);
    out.final_tokens = tape.value(normed);
    if (cfg.fuse_final_norm) out.cls_per_layer.back() = tape.value(extract_cls(tape, normed));
    return out;
}

// Z = concat(z_L, z_{L-1}, ..., z_{L-d_f+1}) -> [B x (d_f * e)].
template <typename T>
Tensor<T> fuse_features(const LayerOutputs<T>& outputs, std::size_t d_f) {
    const std::size_t depth = outputs.cls_per_layer.size();
    if (d_f < 1 || d_f > depth)
        throw UsageError("fuse_features: d_f=" + std::to_string(d_f) + " out of range [1, " +
                         std::to_string(depth) + "]");
    std::vector<Tensor<T>> parts;
    parts.reserve(d_f);
    for (std::size_t i = 0; i < d_f; ++i) parts.push_back(outputs.cls_per_layer[depth - 1 - i]);
    return ops::concat(parts, 1);
}

}  // namespace dipa
