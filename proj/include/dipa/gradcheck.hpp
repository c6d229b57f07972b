#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dipa/adapter.hpp"
#include "dipa/backbone.hpp"
#include "dipa/objective.hpp"
#include "dipa/rng.hpp"
#include "dipa/tape.hpp"
#include "dipa/trainer.hpp"

// Central finite-difference verification of every adjoint and of the
// end-to-end fine-tuning gradient. Shared by the test suite and the
// `gradcheck` CLI command.
namespace dipa::gradcheck {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, scale));
    return t;
}

struct OpCheck {
    std::string name;
    double max_rel_err = 0.0;
};

// Builder: given a tape and the node ids of the trainable leaves (one per
// entry of `leaves`), record the forward graph and return a scalar loss node.
template <typename T>
using GraphBuilder = std::function<int(Tape<T>&, const std::vector<int>&)>;

// |analytic - numeric| / max(|analytic|, |numeric|), with differences below
// `abs_floor` treated as exact.
inline double rel_err(double analytic, double numeric, double abs_floor) {
    const double diff = std::abs(analytic - numeric);
    if (diff <= abs_floor) return 0.0;
    return diff / std::max(std::abs(analytic), std::abs(numeric));
}

template <typename T>
double check_graph(const GraphBuilder<T>& build, const std::vector<Tensor<T>>& leaves, double h,
                   double abs_floor = 1e-8) {
    // analytic gradients from one recorded tape
    Tape<T> tape;
    std::vector<int> ids;
    ids.reserve(leaves.size());
    for (const auto& l : leaves) ids.push_back(tape.leaf(l));
    const int loss = build(tape, ids);
    const GradMap<T> grads = tape.backward(loss);

    auto eval = [&](const std::vector<Tensor<T>>& values) {
        Tape<T> t;
        std::vector<int> vids;
        vids.reserve(values.size());
        for (const auto& v : values) vids.push_back(t.leaf(v));
        return static_cast<double>(t.value(build(t, vids)).item());
    };

    double worst = 0.0;
    std::vector<Tensor<T>> perturbed = leaves;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const Tensor<T>& analytic = grads.at(ids[li]);
        for (std::size_t e = 0; e < leaves[li].size(); ++e) {
            const T original = perturbed[li][e];
            perturbed[li][e] = original + static_cast<T>(h);
            const double f_plus = eval(perturbed);
            perturbed[li][e] = original - static_cast<T>(h);
            const double f_minus = eval(perturbed);
            perturbed[li][e] = original;
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            worst = std::max(worst, rel_err(static_cast<double>(analytic[e]), numeric, abs_floor));
        }
    }
    return worst;
}

// Per-op finite-difference suite over random small shapes. A random constant
// projection turns non-scalar outputs into a scalar loss.
template <typename T>
std::vector<OpCheck> run_op_suite(std::uint64_t seed, double h, double abs_floor = 1e-8) {
    Rng rng(seed);
    std::vector<OpCheck> checks;

    auto project = [](Tape<T>& t, int node, const Tensor<T>& weights) {
        return t.sum(t.mul(node, t.constant(weights)));
    };

    {
        const Tensor<T> w = random_tensor<T>({3, 2}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.matmul(ids[0], ids[1]), w);
        };
        checks.push_back({"matmul", check_graph<T>(b, {random_tensor<T>({3, 4}, rng),
                                                       random_tensor<T>({4, 2}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({2, 3, 2}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.matmul(ids[0], ids[1]), w);
        };
        checks.push_back({"matmul_batched",
                          check_graph<T>(b, {random_tensor<T>({2, 3, 4}, rng),
                                             random_tensor<T>({2, 4, 2}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({3, 4}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.add(ids[0], ids[1]), w);
        };
        checks.push_back({"add", check_graph<T>(b, {random_tensor<T>({3, 4}, rng),
                                                    random_tensor<T>({4}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({3, 4}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.mul(ids[0], ids[1]), w);
        };
        checks.push_back({"mul", check_graph<T>(b, {random_tensor<T>({3, 4}, rng),
                                                    random_tensor<T>({4}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({3, 4}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.scalar_mul(ids[0], 0.37), w);
        };
        checks.push_back({"scalar_mul", check_graph<T>(b, {random_tensor<T>({3, 4}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({3, 5}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.concat({ids[0], ids[1]}, 1), w);
        };
        checks.push_back({"concat", check_graph<T>(b, {random_tensor<T>({3, 2}, rng),
                                                       random_tensor<T>({3, 3}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({3, 2}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.slice(ids[0], 1, 1, 2), w);
        };
        checks.push_back({"slice", check_graph<T>(b, {random_tensor<T>({3, 5}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({4, 2, 3}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.transpose(ids[0], {2, 0, 1}), w);
        };
        checks.push_back({"transpose", check_graph<T>(b, {random_tensor<T>({2, 3, 4}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({6, 4}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.reshape(ids[0], {6, 4}), w);
        };
        checks.push_back({"reshape", check_graph<T>(b, {random_tensor<T>({2, 3, 4}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({3, 6}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.layernorm(ids[0], ids[1], ids[2], 1e-6), w);
        };
        checks.push_back({"layernorm",
                          check_graph<T>(b, {random_tensor<T>({3, 6}, rng),
                                             random_tensor<T>({6}, rng),
                                             random_tensor<T>({6}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({2, 6}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.softmax(ids[0]), w);
        };
        checks.push_back({"softmax", check_graph<T>(b, {random_tensor<T>({2, 6}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({3, 4}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.gelu(ids[0]), w);
        };
        checks.push_back({"gelu", check_graph<T>(b, {random_tensor<T>({3, 4}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({3, 4}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.l2_normalize(ids[0]), w);
        };
        checks.push_back({"l2_normalize", check_graph<T>(b, {random_tensor<T>({3, 4}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({3, 4}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.scale_shift(ids[0], ids[1], ids[2]), w);
        };
        checks.push_back({"scale_shift",
                          check_graph<T>(b, {random_tensor<T>({3, 4}, rng),
                                             random_tensor<T>({4}, rng),
                                             random_tensor<T>({4}, rng)}, h, abs_floor)});
    }
    {
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return t.sum(ids[0]);
        };
        checks.push_back({"sum", check_graph<T>(b, {random_tensor<T>({3, 4}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({4, 2}, rng);
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.cosine_sim(ids[0], ids[1]), w);
        };
        checks.push_back({"cosine_sim", check_graph<T>(b, {random_tensor<T>({4, 3}, rng),
                                                           random_tensor<T>({2, 3}, rng)}, h, abs_floor)});
    }
    {
        const Tensor<T> w = random_tensor<T>({2, 3}, rng);
        const std::vector<int> labels{0, 1, 0, 1, 1};
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return project(t, t.class_means(ids[0], labels, 2), w);
        };
        checks.push_back({"class_means", check_graph<T>(b, {random_tensor<T>({5, 3}, rng)}, h, abs_floor)});
    }
    {
        const std::vector<int> labels{0, 1, 2, 0, 1, 2};
        losses::ProxyAnchorParams params;  // delta 0.1, alpha 32
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return t.proxy_anchor_loss(t.cosine_sim(ids[0], ids[1]), labels, params);
        };
        checks.push_back({"proxy_anchor_loss",
                          check_graph<T>(b, {random_tensor<T>({6, 4}, rng),
                                             random_tensor<T>({3, 4}, rng)}, h, abs_floor)});
    }
    {
        const std::vector<int> labels{1, 0, 2, 1};
        GraphBuilder<T> b = [&](Tape<T>& t, const std::vector<int>& ids) {
            return t.softmax_xent(ids[0], labels);
        };
        checks.push_back({"softmax_xent", check_graph<T>(b, {random_tensor<T>({4, 3}, rng)}, h, abs_floor)});
    }
    return checks;
}

// End-to-end gradient of the proxy-anchor loss through the trainable suffix
// of a 2-block mini encoder, w.r.t. every gamma/beta and the anchors.
template <typename T>
OpCheck run_end_to_end(std::uint64_t seed, double h, double abs_floor = 1e-8) {
    Rng rng(seed);
    BackboneConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.mlp_ratio = 2.0;
    const WeightContainer weights = init_random_weights<T>(cfg, rng);

    const std::size_t n_way = 3, shots = 2, d_t = 2, d_f = 2;
    const std::size_t m = n_way * shots;
    const Tensor<T> images =
        random_tensor<T>({m, cfg.channels, cfg.image_size, cfg.image_size}, rng);
    std::vector<int> labels;
    for (std::size_t c = 0; c < n_way; ++c)
        for (std::size_t s = 0; s < shots; ++s) labels.push_back(static_cast<int>(c));

    const PrefixCache<T> cache = build_prefix_cache(cfg, weights, images, d_t);

    // leaves: 6 sites x 2 tensors x d_t layers, then the anchors
    std::vector<Tensor<T>> leaves;
    const auto dims = adapter_site_dims(cfg);
    for (std::size_t layer = 0; layer < d_t; ++layer)
        for (std::size_t s = 0; s < kAdapterSites; ++s) {
            Tensor<T> gamma(Shape{dims[s]});
            for (auto& v : gamma.data()) v = static_cast<T>(rng.normal(1.0, 0.1));
            leaves.push_back(std::move(gamma));
            leaves.push_back(random_tensor<T>({dims[s]}, rng, 0.1));
        }
    leaves.push_back(random_tensor<T>({n_way, d_f * cfg.embed_dim}, rng));

    losses::ProxyAnchorParams params;
    GraphBuilder<T> build = [&](Tape<T>& t, const std::vector<int>& ids) {
        std::vector<AdapterNodeIds> adapter_ids(d_t);
        std::size_t k = 0;
        for (std::size_t layer = 0; layer < d_t; ++layer)
            for (std::size_t s = 0; s < kAdapterSites; ++s) {
                adapter_ids[layer].sites[s] = {ids[k], ids[k + 1]};
                k += 2;
            }
        const int anchors = ids[k];
        const int tokens = t.constant(cache.tokens);
        const int fused = run_suffix_on_tape(t, cfg, weights, cache, tokens, adapter_ids, d_t,
                                             d_f);
        return t.proxy_anchor_loss(t.cosine_sim(fused, anchors), labels, params);
    };

    return {"end_to_end", check_graph<T>(build, leaves, h, abs_floor)};
}

template <typename T>
std::vector<OpCheck> run_full_suite(std::uint64_t seed, double h, double abs_floor = 1e-8) {
    std::vector<OpCheck> checks = run_op_suite<T>(seed, h, abs_floor);
    checks.push_back(run_end_to_end<T>(seed, h, abs_floor));
    return checks;
}

}  // namespace dipa::gradcheck
