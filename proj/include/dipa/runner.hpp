#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dipa/classifier.hpp"
#include "dipa/episodes.hpp"
#include "dipa/trainer.hpp"

namespace dipa {

// ---------------------------------------------------------------------------
// enum <-> string helpers for config files
// ---------------------------------------------------------------------------

inline std::string to_string(LossKind k) {
    return k == LossKind::ProxyAnchor ? "proxy-anchor" : "ncc-mean";
}
inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "proxy-anchor") return LossKind::ProxyAnchor;
    if (s == "ncc-mean") return LossKind::NccMean;
    throw UsageError("unknown loss '" + s + "' (expected proxy-anchor or ncc-mean)");
}

inline std::string to_string(InferenceKind k) {
    return k == InferenceKind::NccMean ? "ncc-mean" : "ncc-anchor";
}
inline InferenceKind inference_kind_from_string(const std::string& s) {
    if (s == "ncc-mean") return InferenceKind::NccMean;
    if (s == "ncc-anchor") return InferenceKind::NccAnchor;
    throw UsageError("unknown inference '" + s + "' (expected ncc-mean or ncc-anchor)");
}

inline std::string to_string(AdapterInitMode m) {
    return m == AdapterInitMode::Constant ? "constant" : "normal";
}
inline AdapterInitMode adapter_init_from_string(const std::string& s) {
    if (s == "constant") return AdapterInitMode::Constant;
    if (s == "normal") return AdapterInitMode::Normal;
    throw UsageError("unknown adapter init '" + s + "' (expected constant or normal)");
}

inline std::string to_string(AnchorInitMode m) {
    return m == AnchorInitMode::Random ? "random" : "custom";
}
inline AnchorInitMode anchor_init_from_string(const std::string& s) {
    if (s == "random") return AnchorInitMode::Random;
    if (s == "custom") return AnchorInitMode::Custom;
    throw UsageError("unknown anchor init '" + s + "' (expected random or custom)");
}

inline nlohmann::json finetune_to_json(const FinetuneConfig& f) {
    return {{"iterations", f.iterations},
            {"lr_adapters", f.lr_adapters},
            {"lr_anchors", f.lr_anchors},
            {"loss", to_string(f.loss)},
            {"d_t", f.d_t},
            {"d_f", f.d_f},
            {"adapter_init", to_string(f.adapter_init)},
            {"adapter_init_sigma", f.adapter_init_sigma},
            {"anchor_init", to_string(f.anchor_init)},
            {"delta", f.loss_params.margin},
            {"alpha", f.loss_params.scale},
            {"ncc_tau", f.ncc_tau},
            {"use_prefix_cache", f.use_prefix_cache}};
}

inline FinetuneConfig finetune_from_json(const nlohmann::json& j) {
    FinetuneConfig f;
    f.iterations = j.value("iterations", f.iterations);
    f.lr_adapters = j.value("lr_adapters", f.lr_adapters);
    f.lr_anchors = j.value("lr_anchors", f.lr_anchors);
    if (j.contains("loss")) f.loss = loss_kind_from_string(j["loss"].get<std::string>());
    f.d_t = j.value("d_t", f.d_t);
    f.d_f = j.value("d_f", f.d_f);
    if (j.contains("adapter_init"))
        f.adapter_init = adapter_init_from_string(j["adapter_init"].get<std::string>());
    f.adapter_init_sigma = j.value("adapter_init_sigma", f.adapter_init_sigma);
    if (j.contains("anchor_init"))
        f.anchor_init = anchor_init_from_string(j["anchor_init"].get<std::string>());
    f.loss_params.margin = j.value("delta", f.loss_params.margin);
    f.loss_params.scale = j.value("alpha", f.loss_params.scale);
    f.ncc_tau = j.value("ncc_tau", f.ncc_tau);
    f.use_prefix_cache = j.value("use_prefix_cache", f.use_prefix_cache);
    return f;
}

inline nlohmann::json sampler_to_json(const SamplerConfig& s) {
    return {{"mode", s.mode == SamplerMode::FixedWayFixedShot ? "fixed" : "varying"},
            {"fixed_way", s.fixed_way},
            {"fixed_shot", s.fixed_shot},
            {"way_min", s.way_min},
            {"way_max", s.way_max},
            {"shot_min", s.shot_min},
            {"shot_max", s.shot_max},
            {"queries_per_class", s.queries_per_class}};
}

inline SamplerConfig sampler_from_json(const nlohmann::json& j) {
    SamplerConfig s;
    const std::string mode = j.value("mode", "varying");
    if (mode == "fixed")
        s.mode = SamplerMode::FixedWayFixedShot;
    else if (mode == "varying")
        s.mode = SamplerMode::VaryingWayVaryingShot;
    else
        throw UsageError("unknown sampler mode '" + mode + "'");
    s.fixed_way = j.value("fixed_way", s.fixed_way);
    s.fixed_shot = j.value("fixed_shot", s.fixed_shot);
    s.way_min = j.value("way_min", s.way_min);
    s.way_max = j.value("way_max", s.way_max);
    s.shot_min = j.value("shot_min", s.shot_min);
    s.shot_max = j.value("shot_max", s.shot_max);
    s.queries_per_class = j.value("queries_per_class", s.queries_per_class);
    return s;
}

// Full run configuration: superset of backbone + finetune + sampler plus
// paths and run-shape knobs. Loadable from JSON with flag overrides; the
// fully resolved form is echoed into the output directory.
struct RunConfig {
    BackboneConfig backbone;
    FinetuneConfig finetune;
    SamplerConfig sampler;
    GaussianTaskSpec synthetic;
    InferenceKind inference = InferenceKind::NccMean;
    bool use_synthetic = true;
    std::string weights_path;
    std::string pool_path;
    std::string out_dir = "out";
    std::size_t episodes = 600;
    std::size_t workers = 1;
    std::string dtype = "f32";
    std::uint64_t seed = 0;
    std::uint64_t weights_seed = 0;  // used when weights_path is empty
    bool no_timing = false;          // write wall_ms as 0 for byte-stable output

    nlohmann::json to_json() const {
        return {{"backbone", backbone.to_json()},
                {"finetune", finetune_to_json(finetune)},
                {"sampler", sampler_to_json(sampler)},
                {"synthetic", synthetic.to_json()},
                {"inference", to_string(inference)},
                {"use_synthetic", use_synthetic},
                {"weights_path", weights_path},
                {"pool_path", pool_path},
                {"out_dir", out_dir},
                {"episodes", episodes},
                {"workers", workers},
                {"dtype", dtype},
                {"seed", seed},
                {"weights_seed", weights_seed},
                {"no_timing", no_timing}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        if (j.contains("backbone")) c.backbone = BackboneConfig::from_json(j["backbone"]);
        if (j.contains("finetune")) c.finetune = finetune_from_json(j["finetune"]);
        if (j.contains("sampler")) c.sampler = sampler_from_json(j["sampler"]);
        if (j.contains("synthetic")) c.synthetic = GaussianTaskSpec::from_json(j["synthetic"]);
        if (j.contains("inference"))
            c.inference = inference_kind_from_string(j["inference"].get<std::string>());
        c.use_synthetic = j.value("use_synthetic", c.use_synthetic);
        c.weights_path = j.value("weights_path", c.weights_path);
        c.pool_path = j.value("pool_path", c.pool_path);
        c.out_dir = j.value("out_dir", c.out_dir);
        c.episodes = j.value("episodes", c.episodes);
        c.workers = j.value("workers", c.workers);
        c.dtype = j.value("dtype", c.dtype);
        c.seed = j.value("seed", c.seed);
        c.weights_seed = j.value("weights_seed", c.weights_seed);
        c.no_timing = j.value("no_timing", c.no_timing);
        if (c.dtype != "f32" && c.dtype != "f64")
            throw UsageError("RunConfig: dtype must be f32 or f64");
        return c;
    }
};

// Worker cap from the environment; 0 means "no cap".
inline std::size_t env_thread_cap() {
    const char* v = std::getenv("DIPA_THREADS");
    if (!v) return 0;
    const long n = std::strtol(v, nullptr, 10);
    return n > 0 ? static_cast<std::size_t>(n) : 0;
}

// One episode end to end: fine-tune on the support set, embed both splits
// with the adapted encoder, classify queries by nearest centroid.
template <typename T>
EpisodeResult run_episode(const BackboneConfig& cfg, const WeightContainer& weights,
                          FinetuneConfig ft, InferenceKind inference, const Episode<T>& ep,
                          std::size_t episode_id) {
    const auto t0 = std::chrono::steady_clock::now();
    ft.seed = ep.seed;

    const FinetuneResult<T> tuned = finetune(cfg, weights, ft, ep.support_images,
                                             ep.support_labels);

    const AdapterSet<T>* adapters = ft.d_t > 0 ? &tuned.adapters : nullptr;
    const Tensor<T> support_z =
        fused_embeddings(cfg, weights, adapters, ep.support_images, ft.d_f);
    const Tensor<T> query_z = fused_embeddings(cfg, weights, adapters, ep.query_images, ft.d_f);

    CentroidSet<T> centroids =
        inference == InferenceKind::NccAnchor
            ? centroids_from_anchors(tuned.anchors.anchors)
            : compute_centroids(support_z, ep.support_labels, ep.n_way);
    const std::vector<int> predicted = classify(query_z, centroids);

    EpisodeResult r;
    r.episode_id = episode_id;
    r.seed = ep.seed;
    r.n_way = ep.n_way;
    r.shots = ep.shots;
    r.accuracy = accuracy<T>(predicted, ep.query_labels);
    r.loss_first = tuned.loss_trace.front();
    r.loss_last = tuned.loss_trace.back();
    const ClusterReport clusters = cluster_metrics(query_z, ep.query_labels);
    r.silhouette = clusters.silhouette;
    r.intra_cluster = clusters.intra_cluster;
    r.inter_cluster = clusters.inter_cluster;
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    return r;
}

// Episode-parallel execution. Results are written by episode index, so the
// output order is deterministic regardless of worker completion order.
template <typename T>
std::vector<EpisodeResult> run_episodes(const BackboneConfig& cfg, const WeightContainer& weights,
                                        const FinetuneConfig& ft, InferenceKind inference,
                                        const std::vector<Episode<T>>& episodes,
                                        std::size_t workers) {
    const std::size_t cap = env_thread_cap();
    if (cap > 0) workers = std::min(workers, cap);
    workers = std::max<std::size_t>(1, std::min(workers, episodes.size()));

    std::vector<EpisodeResult> results(episodes.size());
    if (workers == 1) {
        for (std::size_t i = 0; i < episodes.size(); ++i)
            results[i] = run_episode(cfg, weights, ft, inference, episodes[i], i);
        return results;
    }

    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::string first_error;
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) {
        threads.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= episodes.size()) return;
                try {
                    results[i] = run_episode(cfg, weights, ft, inference, episodes[i], i);
                } catch (const std::exception& e) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (first_error.empty())
                        first_error = "episode " + std::to_string(i) + ": " + e.what();
                }
            }
        });
    }
    for (auto& th : threads) th.join();
    if (!first_error.empty()) throw Error(first_error);
    return results;
}

// Generate the episode list for a run: synthetic tasks or pool samples, one
// derived seed per episode.
template <typename T>
std::vector<Episode<T>> make_run_episodes(const RunConfig& cfg) {
    std::vector<Episode<T>> episodes;
    episodes.reserve(cfg.episodes);
    Rng master(cfg.seed);
    if (cfg.use_synthetic) {
        for (std::size_t i = 0; i < cfg.episodes; ++i) {
            Rng ep_rng = master.split(i);
            Episode<T> ep = make_synthetic_task<T>(cfg.synthetic, ep_rng);
            ep.seed = ep_rng.seed();
            episodes.push_back(std::move(ep));
        }
    } else {
        const Pool pool = load_pool(cfg.pool_path);
        for (std::size_t i = 0; i < cfg.episodes; ++i) {
            Rng ep_rng = master.split(i);
            Episode<T> ep = sample_episode<T>(pool, cfg.sampler, ep_rng);
            ep.seed = ep_rng.seed();
            episodes.push_back(std::move(ep));
        }
    }
    return episodes;
}

inline void write_run_outputs(const RunConfig& cfg, const std::vector<EpisodeResult>& results,
                              const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream f(out_dir + "/config.json");
        if (!f) throw DataError("run: cannot write '" + out_dir + "/config.json'");
        f << cfg.to_json().dump(2) << "\n";
    }
    {
        std::ofstream f(out_dir + "/results.jsonl");
        if (!f) throw DataError("run: cannot write '" + out_dir + "/results.jsonl'");
        for (const auto& r : results) f << r.to_json(!cfg.no_timing).dump() << "\n";
    }
    {
        const SummaryStats s = aggregate(results);
        nlohmann::json summary{{"mean_accuracy", s.mean_accuracy},
                               {"ci95", s.ci95},
                               {"n", s.n},
                               {"single_episode_warning", s.single_episode_warning}};
        std::ofstream f(out_dir + "/summary.json");
        if (!f) throw DataError("run: cannot write '" + out_dir + "/summary.json'");
        f << summary.dump(2) << "\n";
    }
}

}  // namespace dipa
