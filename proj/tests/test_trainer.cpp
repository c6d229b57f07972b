#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dipa/episodes.hpp"
#include "dipa/trainer.hpp"

using namespace dipa;

namespace {

BackboneConfig tiny_config(std::size_t depth = 2) {
    BackboneConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.embed_dim = 8;
    cfg.depth = depth;
    cfg.heads = 2;
    cfg.mlp_ratio = 2.0;
    return cfg;
}

template <typename T>
Tensor<T> random_images(const BackboneConfig& cfg, std::size_t b, Rng& rng) {
    Tensor<T> t(Shape{b, cfg.channels, cfg.image_size, cfg.image_size});
    for (auto& v : t.data()) v = static_cast<T>(rng.normal());
    return t;
}

// Independent scalar transcription of the NAdam update, computing the
// momentum-schedule products from scratch each step.
double nadam_scalar_oracle(double x0, const std::vector<double>& grads, double lr, double beta1,
                           double beta2, double eps, double psi) {
    double x = x0, m = 0.0, v = 0.0;
    auto mu = [&](double t) { return beta1 * (1.0 - 0.5 * std::pow(0.96, t * psi)); };
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        const double g = grads[t - 1];
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        double prod_t = 1.0, prod_next = 1.0;
        for (std::size_t i = 1; i <= t; ++i) prod_t *= mu(static_cast<double>(i));
        prod_next = prod_t * mu(static_cast<double>(t + 1));
        const double m_hat = mu(static_cast<double>(t + 1)) * m / (1.0 - prod_next) +
                             (1.0 - mu(static_cast<double>(t))) * g / (1.0 - prod_t);
        const double v_hat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
        x -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
    return x;
}

FinetuneConfig quick_ft(std::size_t iterations, std::size_t d_t, std::size_t d_f) {
    FinetuneConfig ft;
    ft.iterations = iterations;
    ft.d_t = d_t;
    ft.d_f = d_f;
    return ft;
}

}  // namespace

TEST_CASE("nadam: zero gradients keep the parameter constant") {
    TensorD p(Shape{3}, {1, -2, 0.5});
    const TensorD p0 = p;
    NAdamState<double> state;
    for (int i = 0; i < 10; ++i) nadam_step(p, TensorD(Shape{3}), state, 0.1);
    CHECK(p.data() == p0.data());
}

TEST_CASE("nadam: first step descends along sign(g)") {
    TensorD p(Shape{2});
    NAdamState<double> state;
    const TensorD g(Shape{2}, {3.0, -0.7});
    nadam_step(p, g, state, 0.01);
    CHECK(p[0] < 0.0);
    CHECK(p[1] > 0.0);
}

TEST_CASE("nadam: 5 steps on a 1-D quadratic match the scalar reference") {
    // f(x) = x^2 / 2, grad = x
    const NAdamConfig cfg;
    TensorD p = TensorD::scalar(1.0);
    NAdamState<double> state;
    std::vector<double> grads;
    for (int t = 0; t < 5; ++t) {
        grads.push_back(p.item());
        nadam_step(p, TensorD::scalar(p.item()), state, 0.1, cfg);
    }
    // replay the recorded gradient sequence through the oracle
    const double want = nadam_scalar_oracle(1.0, grads, 0.1, cfg.beta1, cfg.beta2, cfg.eps,
                                            cfg.momentum_decay);
    CHECK(std::abs(p.item() - want) < 1e-12);
}

TEST_CASE("nadam input validation") {
    TensorD p(Shape{2});
    NAdamState<double> state;
    CHECK_THROWS_AS(nadam_step(p, TensorD(Shape{3}), state, 0.1), ShapeError);
    TensorD bad(Shape{2});
    bad[0] = std::nan("");
    CHECK_THROWS_AS(nadam_step(p, bad, state, 0.1), NumericalError);
}

TEST_CASE("prefix cache: suffix replay reproduces the full forward bit-exactly") {
    const BackboneConfig cfg = tiny_config(4);
    Rng rng(3);
    const WeightContainer w = init_random_weights<double>(cfg, rng);
    const TensorD images = random_images<double>(cfg, 4, rng);
    const LayerOutputs<double> full = forward<double>(cfg, w, nullptr, images);

    for (std::size_t d_t : {std::size_t(0), std::size_t(2), std::size_t(4)}) {
        const PrefixCache<double> cache = build_prefix_cache(cfg, w, images, d_t);
        CHECK(cache.boundary == cfg.depth - d_t);
        CHECK(cache.memory_bytes() > 0);

        Tape<double> tape;
        const int tokens = tape.constant(cache.tokens);
        const int fused = run_suffix_on_tape(tape, cfg, w, cache, tokens, {}, d_t, 1);
        CHECK(tape.value(fused).data() == full.cls_per_layer.back().data());
    }
}

TEST_CASE("prefix cache boundaries") {
    const BackboneConfig cfg = tiny_config(2);
    Rng rng(5);
    const WeightContainer w = init_random_weights<double>(cfg, rng);
    const TensorD images = random_images<double>(cfg, 2, rng);

    // d_t = L: only patch-embedded tokens are cached
    const PrefixCache<double> all = build_prefix_cache(cfg, w, images, cfg.depth);
    CHECK(all.boundary == 0);
    CHECK(all.frozen_cls.empty());
    CHECK(all.tokens.data() == embed_images(cfg, w, images).data());

    // d_t = 0: the whole forward is cached
    const PrefixCache<double> none = build_prefix_cache(cfg, w, images, 0);
    CHECK(none.boundary == cfg.depth);
    CHECK(none.frozen_cls.size() == cfg.depth);

    CHECK_THROWS_AS(build_prefix_cache(cfg, w, images, cfg.depth + 1), UsageError);
}

TEST_CASE("finetune: iterations=1 with lr=0 leaves parameters unchanged") {
    const BackboneConfig cfg = tiny_config(2);
    Rng rng(7);
    const WeightContainer w = init_random_weights<double>(cfg, rng);
    const TensorD images = random_images<double>(cfg, 6, rng);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};

    FinetuneConfig ft = quick_ft(1, 1, 1);
    ft.lr_adapters = 0.0;
    ft.lr_anchors = 0.0;
    ft.seed = 11;
    const FinetuneResult<double> r = finetune(cfg, w, ft, images, labels);

    REQUIRE(r.loss_trace.size() == 1);
    for (const auto& pair : r.adapters.layers[0]) {
        for (double v : pair.gamma.data()) CHECK(v == 1.0);
        for (double v : pair.beta.data()) CHECK(v == 0.0);
    }
    // the anchors equal their seeded initialization
    Rng ref(11);
    (void)attach_adapters<double>(cfg, 1, AdapterInitMode::Constant);  // constant: no draws
    const AnchorSet<double> want = init_anchors<double>(3, cfg.embed_dim, ref);
    CHECK(r.anchors.anchors.data() == want.anchors.data());

    CHECK_THROWS_AS(finetune(cfg, w, quick_ft(0, 1, 1), images, labels), UsageError);
}

TEST_CASE("finetune is deterministic per seed") {
    const BackboneConfig cfg = tiny_config(2);
    Rng rng(13);
    const WeightContainer w = init_random_weights<double>(cfg, rng);
    const TensorD images = random_images<double>(cfg, 6, rng);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};

    FinetuneConfig ft = quick_ft(5, 1, 2);
    ft.seed = 21;
    const FinetuneResult<double> a = finetune(cfg, w, ft, images, labels);
    const FinetuneResult<double> b = finetune(cfg, w, ft, images, labels);
    CHECK(a.loss_trace == b.loss_trace);
    CHECK(a.anchors.anchors.data() == b.anchors.anchors.data());

    // the frozen weights are untouched
    const std::uint64_t hash_before = w.content_hash();
    (void)finetune(cfg, w, ft, images, labels);
    CHECK(w.content_hash() == hash_before);
}

TEST_CASE("cached and uncached fine-tuning produce identical loss traces") {
    const BackboneConfig cfg = tiny_config(4);
    Rng rng(17);
    const WeightContainer w = init_random_weights<double>(cfg, rng);
    const TensorD images = random_images<double>(cfg, 6, rng);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};

    for (std::size_t d_t : {std::size_t(1), std::size_t(2)}) {
        FinetuneConfig cached = quick_ft(6, d_t, 2);
        cached.seed = 31;
        FinetuneConfig uncached = cached;
        uncached.use_prefix_cache = false;

        const FinetuneResult<double> a = finetune(cfg, w, cached, images, labels);
        const FinetuneResult<double> b = finetune(cfg, w, uncached, images, labels);
        REQUIRE(a.loss_trace.size() == b.loss_trace.size());
        for (std::size_t i = 0; i < a.loss_trace.size(); ++i)
            CHECK(std::abs(a.loss_trace[i] - b.loss_trace[i]) < 1e-9);
        CHECK(a.cache_bytes > 0);
        CHECK(b.cache_bytes > 0);
    }
}

TEST_CASE("finetune decreases the loss on synthetic tasks (statistical)") {
    const BackboneConfig cfg = tiny_config(2);
    Rng wrng(19);
    const WeightContainer w = init_random_weights<double>(cfg, wrng);

    GaussianTaskSpec spec;
    spec.n_way = 5;
    spec.shots = 5;
    spec.queries_per_class = 1;
    spec.image_size = cfg.image_size;
    spec.channels = cfg.channels;

    int decreased = 0;
    const int runs = 50;
    for (int s = 0; s < runs; ++s) {
        Rng erng(1000 + s);
        const Episode<double> ep = make_synthetic_task<double>(spec, erng);
        FinetuneConfig ft = quick_ft(20, 1, 2);
        ft.seed = 2000 + s;
        const FinetuneResult<double> r = finetune(cfg, w, ft, ep.support_images,
                                                  ep.support_labels);
        if (r.loss_trace.back() < r.loss_trace.front()) ++decreased;
    }
    CHECK(decreased >= static_cast<int>(0.95 * runs));
}

TEST_CASE("finetune rejects bad inputs") {
    const BackboneConfig cfg = tiny_config(2);
    Rng rng(23);
    const WeightContainer w = init_random_weights<double>(cfg, rng);
    const TensorD images = random_images<double>(cfg, 4, rng);

    CHECK_THROWS_AS(finetune(cfg, w, quick_ft(1, 1, 1), images, {0, 0, 2, 2}), DataError);
    CHECK_THROWS_AS(finetune(cfg, w, quick_ft(1, 1, 1), images, {0, 0}), UsageError);
    CHECK_THROWS_AS(finetune(cfg, w, quick_ft(1, 5, 1), images, {0, 0, 1, 1}), UsageError);
    CHECK_THROWS_AS(finetune(cfg, w, quick_ft(1, 1, 5), images, {0, 0, 1, 1}), UsageError);
}
