#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipa/rng.hpp"
#include "dipa/tensor.hpp"

namespace dipa {

// One few-shot task: a labelled support set for adaptation and a disjoint
// query set for evaluation. Labels are densely reindexed 0..N-1.
template <typename T>
struct Episode {
    Tensor<T> support_images;  // [M x C x H x W]
    std::vector<int> support_labels;
    Tensor<T> query_images;  // [Q x C x H x W]
    std::vector<int> query_labels;
    std::size_t n_way = 0;
    std::vector<std::size_t> shots;  // per-class support counts
    std::uint64_t seed = 0;
};

enum class SamplerMode { VaryingWayVaryingShot, FixedWayFixedShot };

struct SamplerConfig {
    SamplerMode mode = SamplerMode::VaryingWayVaryingShot;
    std::size_t fixed_way = 5;
    std::size_t fixed_shot = 5;
    std::size_t way_min = 5;
    std::size_t way_max = 50;
    std::size_t shot_min = 2;  // >= 2 so the discriminative loss has signal
    std::size_t shot_max = 10;
    std::size_t queries_per_class = 10;

    void validate() const {
        if (way_min < 2 || way_min > way_max) throw UsageError("SamplerConfig: bad way range");
        if (shot_min < 1 || shot_min > shot_max) throw UsageError("SamplerConfig: bad shot range");
        if (queries_per_class < 1) throw UsageError("SamplerConfig: queries_per_class >= 1");
        if (mode == SamplerMode::FixedWayFixedShot && (fixed_way < 2 || fixed_shot < 1))
            throw UsageError("SamplerConfig: bad fixed way/shot");
    }
};

// ---------------------------------------------------------------------------
/// Labelled pool: a directory of raw little-endian tensor files plus an
// index.json listing {file, label, shape, dtype}.
// ---------------------------------------------------------------------------

struct PoolEntry {
    std::string file;
    int label = 0;
    Shape shape;
    std::string dtype;  // "f32" | "f64"
};

struct Pool {
    std::string dir;
    std::vector<PoolEntry> entries;
    std::map<int, std::vector<std::size_t>> by_class;

    std::size_t n_classes() const { return by_class.size(); }
};

inline Pool load_pool(const std::string& dir) {
    std::ifstream f(dir + "/index.json");
    if (!f) throw DataError("pool: cannot open '" + dir + "/index.json'");
    nlohmann::json index;
    try {
        f >> index;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("pool: malformed index.json: ") + e.what());
    }
    Pool pool;
    pool.dir = dir;
    for (const auto& item : index) {
        PoolEntry entry;
        entry.file = item.at("file").get<std::string>();
        entry.label = item.at("label").get<int>();
        entry.shape = item.at("shape").get<Shape>();
        entry.dtype = item.value("dtype", "f32");
        if (entry.dtype != "f32" && entry.dtype != "f64")
            throw DataError("pool: unknown dtype '" + entry.dtype + "' for " + entry.file);
        pool.by_class[entry.label].push_back(pool.entries.size());
        pool.entries.push_back(std::move(entry));
    }
    if (pool.entries.empty()) throw DataError("pool: empty index");
    return pool;
}

template <typename T>
Tensor<T> load_pool_sample(const Pool& pool, std::size_t idx) {
    const PoolEntry& entry = pool.entries.at(idx);
    std::ifstream f(pool.dir + "/" + entry.file, std::ios::binary);
    if (!f) throw DataError("pool: cannot open sample '" + entry.file + "'");
    const std::size_t n = shape_numel(entry.shape);
    if (entry.dtype == "f32") {
        std::vector<float> data(n);
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(n * sizeof(float)));
        if (!f) throw DataError("pool: truncated sample '" + entry.file + "'");
        return Tensor<float>(entry.shape, std::move(data)).template cast<T>();
    }
    std::vector<double> data(n);
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(n * sizeof(double)));
    if (!f) throw DataError("pool: truncated sample '" + entry.file + "'");
    return Tensor<double>(entry.shape, std::move(data)).template cast<T>();
}

namespace detail {

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& samples) {
    Shape shape = samples.at(0).shape();
    shape.insert(shape.begin(), samples.size());
    Tensor<T> out(shape);
    const std::size_t per = samples[0].size();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].size() != per) throw ShapeError("stack: inconsistent sample shapes");
        std::copy(samples[i].data().begin(), samples[i].data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
}

}  // namespace detail

// Uniform episode sampling over a labelled pool (the hierarchy-aware
// benchmark sampler is intentionally not reproduced). Deterministic per
// (pool, config, rng seed).
template <typename T>
Episode<T> sample_episode(const Pool& pool, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<int> classes;
    for (const auto& [label, idxs] : pool.by_class) classes.push_back(label);

    std::size_t n_way;
    if (cfg.mode == SamplerMode::FixedWayFixedShot) {
        n_way = cfg.fixed_way;
    } else {
        const std::size_t hi = std::min(cfg.way_max, classes.size());
        if (hi < cfg.way_min)
            throw DataError("sample_episode: pool has only " + std::to_string(classes.size()) +
                            " classes, need >= " + std::to_string(cfg.way_min));
        n_way = cfg.way_min + rng.below(hi - cfg.way_min + 1);
    }
    if (n_way > classes.size())
        throw DataError("sample_episode: pool has fewer classes than requested way");

    rng.shuffle(classes.begin(), classes.end());
    classes.resize(n_way);

    Episode<T> ep;
    ep.n_way = n_way;
    std::vector<Tensor<T>> support, query;
    for (std::size_t c = 0; c < n_way; ++c) {
        std::vector<std::size_t> idxs = pool.by_class.at(classes[c]);
        std::size_t shots;
        if (cfg.mode == SamplerMode::FixedWayFixedShot) {
            shots = cfg.fixed_shot;
            if (idxs.size() < shots + cfg.queries_per_class)
                throw DataError("sample_episode: class " + std::to_string(classes[c]) +
                                " has too few samples");
        } else {
            if (idxs.size() < cfg.shot_min + cfg.queries_per_class)
                throw DataError("sample_episode: class " + std::to_string(classes[c]) +
                                " has too few samples");
            const std::size_t hi = std::min(cfg.shot_max, idxs.size() - cfg.queries_per_class);
            shots = cfg.shot_min + rng.below(hi - cfg.shot_min + 1);
        }
        rng.shuffle(idxs.begin(), idxs.end());
        for (std::size_t i = 0; i < shots; ++i) {
            support.push_back(load_pool_sample<T>(pool, idxs[i]));
            ep.support_labels.push_back(static_cast<int>(c));
        }
        for (std::size_t i = 0; i < cfg.queries_per_class; ++i) {
            query.push_back(load_pool_sample<T>(pool, idxs[shots + i]));
            ep.query_labels.push_back(static_cast<int>(c));
        }
        ep.shots.push_back(shots);
    }
    ep.support_images = detail::stack(support);
    ep.query_images = detail::stack(query);
    return ep;
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale task generator: Gaussian class blobs in image space,
// optionally passed through a fixed random linear map that emulates an
// unseen-domain shift.
// ---------------------------------------------------------------------------

struct GaussianTaskSpec {
    std::size_t n_way = 5;
    std::size_t shots = 5;
    std::size_t queries_per_class = 10;
    std::size_t channels = 1;
    std::size_t image_size = 8;
    double mean_scale = 1.0;   // class means drawn from N(0, mean_scale^2)
    double noise_sigma = 0.5;  // per-pixel sample noise
    bool domain_shift = false;
    double shift_strength = 1.0;  // x' = (I + strength * G / sqrt(D)) x
    // Additive part of the domain shift: a per-episode constant offset with
    // per-pixel scale shift_bias, shared by support and query.
    double shift_bias = 0.0;
    // When > 0, class means are nonzero only on this many randomly chosen
    // pixels per episode; the rest carry pure noise, so classification
    // rewards feature reweighting.
    std::size_t signal_dims = 0;
    // Noise level on the non-signal pixels when signal_dims > 0; < 0 means
    // "same as noise_sigma". Large values emulate an episode-specific
    // corruption that drowns the class signal unless those pixels are
    // down-weighted.
    double nuisance_sigma = -1.0;

    void validate() const {
        if (n_way < 2) throw UsageError("GaussianTaskSpec: n_way must be >= 2");
        if (shots < 1 || queries_per_class < 1)
            throw UsageError("GaussianTaskSpec: shots and queries must be >= 1");
        if (channels == 0 || image_size == 0) throw UsageError("GaussianTaskSpec: empty images");
        if (!(mean_scale > 0)) throw UsageError("GaussianTaskSpec: mean_scale must be positive");
        if (noise_sigma < 0) throw UsageError("GaussianTaskSpec: noise_sigma must be >= 0");
        if (signal_dims > channels * image_size * image_size)
            throw UsageError("GaussianTaskSpec: signal_dims exceeds the image size");
    }

    nlohmann::json to_json() const {
        return {{"n_way", n_way},
                {"shots", shots},
                {"queries_per_class", queries_per_class},
                {"channels", channels},
                {"image_size", image_size},
                {"mean_scale", mean_scale},
                {"noise_sigma", noise_sigma},
                {"domain_shift", domain_shift},
                {"shift_strength", shift_strength},
                {"shift_bias", shift_bias},
                {"signal_dims", signal_dims},
                {"nuisance_sigma", nuisance_sigma}};
    }

    static GaussianTaskSpec from_json(const nlohmann::json& j) {
        GaussianTaskSpec s;
        s.n_way = j.value("n_way", s.n_way);
        s.shots = j.value("shots", s.shots);
        s.queries_per_class = j.value("queries_per_class", s.queries_per_class);
        s.channels = j.value("channels", s.channels);
        s.image_size = j.value("image_size", s.image_size);
        s.mean_scale = j.value("mean_scale", s.mean_scale);
        s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
        s.domain_shift = j.value("domain_shift", s.domain_shift);
        s.shift_strength = j.value("shift_strength", s.shift_strength);
        s.shift_bias = j.value("shift_bias", s.shift_bias);
        s.signal_dims = j.value("signal_dims", s.signal_dims);
        s.nuisance_sigma = j.value("nuisance_sigma", s.nuisance_sigma);
        s.validate();
        return s;
    }
};

template <typename T>
Episode<T> make_synthetic_task(const GaussianTaskSpec& spec, Rng& rng) {
    spec.validate();
    const std::size_t d = spec.channels * spec.image_size * spec.image_size;

    std::vector<std::size_t> signal(d);
    std::iota(signal.begin(), signal.end(), std::size_t(0));
    if (spec.signal_dims > 0) {
        rng.shuffle(signal.begin(), signal.end());
        signal.resize(spec.signal_dims);
    }

    std::vector<std::vector<double>> means(spec.n_way, std::vector<double>(d, 0.0));
    for (auto& m : means)
        for (std::size_t i : signal) m[i] = rng.normal(0.0, spec.mean_scale);

    std::vector<double> sigma(d, spec.noise_sigma);
    if (spec.signal_dims > 0 && spec.nuisance_sigma >= 0) {
        sigma.assign(d, spec.nuisance_sigma);
        for (std::size_t i : signal) sigma[i] = spec.noise_sigma;
    }

    // One shift map and offset per episode, shared by support and query.
    std::vector<double> shift;
    std::vector<double> bias;
    if (spec.domain_shift) {
        shift.resize(d * d);
        const double scale = spec.shift_strength / std::sqrt(static_cast<double>(d));
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                shift[i * d + j] = (i == j ? 1.0 : 0.0) + scale * rng.normal();
        bias.resize(d, 0.0);
        if (spec.shift_bias > 0)
            for (auto& v : bias) v = rng.normal(0.0, spec.shift_bias);
    }

    auto draw = [&](std::size_t cls) {
        std::vector<double> x(d);
        for (std::size_t i = 0; i < d; ++i)
            x[i] = means[cls][i] + sigma[i] * rng.normal();
        if (spec.domain_shift) {
            std::vector<double> y(bias);
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) y[i] += shift[i * d + j] * x[j];
            x = std::move(y);
        }
        std::vector<T> out(d);
        for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<T>(x[i]);
        return Tensor<T>(Shape{spec.channels, spec.image_size, spec.image_size}, std::move(out));
    };

    Episode<T> ep;
    ep.n_way = spec.n_way;
    std::vector<Tensor<T>> support, query;
    for (std::size_t c = 0; c < spec.n_way; ++c) {
        for (std::size_t i = 0; i < spec.shots; ++i) {
            support.push_back(draw(c));
            ep.support_labels.push_back(static_cast<int>(c));
        }
        for (std::size_t i = 0; i < spec.queries_per_class; ++i) {
            query.push_back(draw(c));
            ep.query_labels.push_back(static_cast<int>(c));
        }
        ep.shots.push_back(spec.shots);
    }
    ep.support_images = detail::stack(support);
    ep.query_images = detail::stack(query);
    return ep;
}

// ---------------------------------------------------------------------------
// Cross-episode aggregation
// ---------------------------------------------------------------------------

struct EpisodeResult {
    std::size_t episode_id = 0;
    std::uint64_t seed = 0;
    std::size_t n_way = 0;
    std::vector<std::size_t> shots;
    double accuracy = 0.0;
    double loss_first = 0.0;
    double loss_last = 0.0;
    double silhouette = 0.0;
    double intra_cluster = 0.0;
    double inter_cluster = 0.0;
    double wall_ms = 0.0;

    nlohmann::json to_json(bool include_timing = true) const {
        nlohmann::json j{{"episode_id", episode_id},
                         {"seed", seed},
                         {"n_way", n_way},
                         {"shots", shots},
                         {"accuracy", accuracy},
                         {"loss_first", loss_first},
                         {"loss_last", loss_last},
                         {"silhouette", silhouette},
                         {"intra_cluster", intra_cluster},
                         {"inter_cluster", inter_cluster}};
        j["wall_ms"] = include_timing ? wall_ms : 0.0;
        return j;
    }
};

// mean, sample std (n-1 denominator), 95% CI = 1.96 * s / sqrt(n).
struct SummaryStats {
    double mean_accuracy = 0.0;
    double ci95 = 0.0;
    std::size_t n = 0;
    bool single_episode_warning = false;
};

inline SummaryStats aggregate(const std::vector<double>& accuracies) {
    if (accuracies.empty()) throw UsageError("aggregate: empty result list");
    SummaryStats s;
    s.n = accuracies.size();
    s.mean_accuracy =
        std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / static_cast<double>(s.n);
    if (s.n == 1) {
        s.single_episode_warning = true;
        return s;
    }
    double ss = 0.0;
    for (double a : accuracies) ss += (a - s.mean_accuracy) * (a - s.mean_accuracy);
    const double stddev = std::sqrt(ss / static_cast<double>(s.n - 1));
    s.ci95 = 1.96 * stddev / std::sqrt(static_cast<double>(s.n));
    return s;
}

inline SummaryStats aggregate(const std::vector<EpisodeResult>& results) {
    std::vector<double> accs;
    accs.reserve(results.size());
    for (const auto& r : results) accs.push_back(r.accuracy);
    return aggregate(accs);
}

}  // namespace dipa
