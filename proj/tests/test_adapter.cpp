#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dipa/adapter.hpp"
#include "dipa/backbone.hpp"

using namespace dipa;

namespace {

BackboneConfig vit_small() {
    BackboneConfig cfg;  // defaults are ViT-small already
    return cfg;
}

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.embed_dim = 8;
    cfg.depth = 4;
    cfg.heads = 2;
    cfg.mlp_ratio = 2.0;
    return cfg;
}

}  // namespace

TEST_CASE("parameter-count formula matches published ViT-small numbers") {
    CHECK(adapter_param_formula(7, 384, 1536) == 64512);
    CHECK(adapter_param_formula(9, 384, 1536) == 82944);
    CHECK(adapter_param_formula(12, 384, 1536) == 110592);
    // per-layer count
    CHECK(adapter_param_formula(1, 384, 1536) == 9216);
}

TEST_CASE("formula matches exhaustive enumeration for every d_t") {
    const BackboneConfig cfg = tiny_config();
    for (std::size_t d_t = 0; d_t <= cfg.depth; ++d_t) {
        const AdapterSet<double> set =
            attach_adapters<double>(cfg, d_t, AdapterInitMode::Constant);
        CHECK(set.param_count() ==
              adapter_param_formula(d_t, cfg.embed_dim, cfg.hidden_dim()));
    }
}

TEST_CASE("site dims follow {e,e,e,h,h,e}") {
    const BackboneConfig cfg = tiny_config();
    const auto dims = adapter_site_dims(cfg);
    const std::size_t e = cfg.embed_dim, h = cfg.hidden_dim();
    CHECK(dims == std::array<std::size_t, 6>{e, e, e, h, h, e});

    const AdapterSet<double> set = attach_adapters<double>(cfg, 2, AdapterInitMode::Constant);
    for (const auto& layer : set.layers)
        for (std::size_t s = 0; s < kAdapterSites; ++s) {
            CHECK(layer[s].gamma.size() == dims[s]);
            CHECK(layer[s].beta.size() == dims[s]);
        }
}

TEST_CASE("attach: boundaries, init modes, coverage") {
    const BackboneConfig cfg = tiny_config();

    const AdapterSet<double> empty = attach_adapters<double>(cfg, 0, AdapterInitMode::Constant);
    CHECK(empty.param_count() == 0);
    CHECK_FALSE(empty.covers_block(cfg.depth - 1));

    const AdapterSet<double> full = attach_adapters<double>(cfg, cfg.depth,
                                                            AdapterInitMode::Constant);
    CHECK(full.covers_block(0));

    CHECK_THROWS_AS(attach_adapters<double>(cfg, cfg.depth + 1, AdapterInitMode::Constant),
                    UsageError);

    const AdapterSet<double> part = attach_adapters<double>(cfg, 2, AdapterInitMode::Constant);
    CHECK(part.first_block() == cfg.depth - 2);
    CHECK_FALSE(part.covers_block(cfg.depth - 3));
    CHECK(part.covers_block(cfg.depth - 1));
    CHECK_THROWS_AS(part.for_block(0), UsageError);

    // constant init has no randomness
    for (const auto& layer : part.layers)
        for (const auto& pair : layer) {
            for (double v : pair.gamma.data()) CHECK(v == 1.0);
            for (double v : pair.beta.data()) CHECK(v == 0.0);
        }

    Rng rng(3);
    const AdapterSet<double> normal =
        attach_adapters<double>(cfg, 1, AdapterInitMode::Normal, 0.02, &rng);
    bool any_off_one = false;
    for (const auto& pair : normal.layers[0])
        for (double v : pair.gamma.data()) any_off_one = any_off_one || v != 1.0;
    CHECK(any_off_one);

    CHECK_THROWS_AS(attach_adapters<double>(cfg, 1, AdapterInitMode::Normal, 0.02, nullptr),
                    UsageError);
}

TEST_CASE("count_params report (Table-style accounting)") {
    const BackboneConfig cfg = vit_small();
    const ParamReport r = count_params(cfg, 7, 5, 4);
    CHECK(r.adapter_params == 64512);
    CHECK(r.anchor_params == 5 * 4 * 384);  // 7680
    CHECK(r.total == 64512 + 7680);
    CHECK(r.backbone_params == 21665664);
    // adapter-only ratio for d_t=7 is ~0.30%
    CHECK(static_cast<double>(r.adapter_params) / static_cast<double>(r.backbone_params) ==
          doctest::Approx(0.0030).epsilon(0.02));
}

TEST_CASE("adapter container round trip") {
    const BackboneConfig cfg = tiny_config();
    Rng rng(5);
    const AdapterSet<double> set =
        attach_adapters<double>(cfg, 2, AdapterInitMode::Normal, 0.05, &rng);

    WeightContainer w;
    adapters_to_container(set, w);
    CHECK(w.count() == 2 * kAdapterSites * 2);
    CHECK(w.has("ssf.3.post_ln1.gamma"));  // 1-based layer index of block 2
    CHECK(w.has("ssf.4.post_fc2.beta"));

    const AdapterSet<double> back = adapters_from_container<double>(w, cfg, 2);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t s = 0; s < kAdapterSites; ++s) {
            CHECK(back.layers[l][s].gamma.data() == set.layers[l][s].gamma.data());
            CHECK(back.layers[l][s].beta.data() == set.layers[l][s].beta.data());
        }
}
