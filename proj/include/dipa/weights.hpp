#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dipa/rng.hpp"
#include "dipa/tensor.hpp"

namespace dipa {

struct BackboneConfig {
    std::size_t image_size = 224;
    std::size_t patch_size = 16;
    std::size_t channels = 3;
    std::size_t embed_dim = 384;
    std::size_t depth = 12;
    std::size_t heads = 6;
    double mlp_ratio = 4.0;
    double ln_eps = 1e-6;
    // When set, the fused z_L comes from the final pre-head layernorm instead
    // of the raw block output.
    bool fuse_final_norm = false;

    std::size_t hidden_dim() const {
        return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(embed_dim)));
    }
    std::size_t patches_per_side() const { return image_size / patch_size; }
    std::size_t n_patches() const { return patches_per_side() * patches_per_side(); }
    std::size_t n_tokens() const { return n_patches() + 1; }
    std::size_t head_dim() const { return embed_dim / heads; }

    void validate() const {
        if (patch_size == 0 || image_size % patch_size != 0)
            throw UsageError("BackboneConfig: image_size must be divisible by patch_size");
        if (heads == 0 || embed_dim % heads != 0)
            throw UsageError("BackboneConfig: embed_dim must be divisible by heads");
        if (depth < 1) throw UsageError("BackboneConfig: depth must be >= 1");
        if (!(mlp_ratio > 0)) throw UsageError("BackboneConfig: mlp_ratio must be positive");
        if (!(ln_eps > 0)) throw UsageError("BackboneConfig: ln_eps must be positive");
        if (channels == 0) throw UsageError("BackboneConfig: channels must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"image_size", image_size}, {"patch_size", patch_size},
                {"channels", channels},     {"embed_dim", embed_dim},
                {"depth", depth},           {"heads", heads},
                {"mlp_ratio", mlp_ratio},   {"ln_eps", ln_eps},
                {"fuse_final_norm", fuse_final_norm}};
    }

    static BackboneConfig from_json(const nlohmann::json& j) {
        BackboneConfig c;
        c.image_size = j.value("image_size", c.image_size);
        c.patch_size = j.value("patch_size", c.patch_size);
        c.channels = j.value("channels", c.channels);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.depth = j.value("depth", c.depth);
        c.heads = j.value("heads", c.heads);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
        c.ln_eps = j.value("ln_eps", c.ln_eps);
        c.fuse_final_norm = j.value("fuse_final_norm", c.fuse_final_norm);
        c.validate();
        return c;
    }
};

// A named-tensor store holding either f32 or f64 tensors. The stored dtype is
// preserved across save/load so round trips are bit-exact.
class WeightContainer {
public:
    using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

    template <typename T>
    void set(const std::string& name, Tensor<T> t) {
        tensors_.insert_or_assign(name, AnyTensor(std::move(t)));
    }

    bool has(const std::string& name) const { return tensors_.count(name) > 0; }

    // Fetch as element type T, converting when the stored dtype differs.
    template <typename T>
    Tensor<T> get(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end())
            throw DataError("WeightContainer: missing tensor '" + name + "'");
        return std::visit(
            [](const auto& t) -> Tensor<T> {
                using Stored = typename std::decay_t<decltype(t)>;
                if constexpr (std::is_same_v<Stored, Tensor<T>>)
                    return t;
                else
                    return t.template cast<T>();
            },
            it->second);
    }

    Shape shape_of(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end())
            throw DataError("WeightContainer: missing tensor '" + name + "'");
        return std::visit([](const auto& t) { return t.shape(); }, it->second);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(tensors_.size());
        for (const auto& [k, v] : tensors_) out.push_back(k);
        return out;
    }

    std::size_t count() const { return tensors_.size(); }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& [k, v] : tensors_)
            n += std::visit([](const auto& t) { return t.size(); }, v);
        return n;
    }

    const std::map<std::string, AnyTensor>& tensors() const { return tensors_; }

    // FNV-1a over names, dtypes, shapes and raw payload bytes.
    std::uint64_t content_hash() const {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        auto mix_bytes = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 0x100000001B3ULL;
            }
        };
        for (const auto& [name, any] : tensors_) {
            mix_bytes(name.data(), name.size());
            std::visit(
                [&](const auto& t) {
                    for (std::size_t d : t.shape()) mix_bytes(&d, sizeof(d));
                    mix_bytes(t.data().data(), t.data().size() * sizeof(t.data()[0]));
                },
                any);
        }
        return h;
    }

    bool operator==(const WeightContainer& other) const {
        if (tensors_.size() != other.tensors_.size()) return false;
        for (const auto& [name, any] : tensors_) {
            auto it = other.tensors_.find(name);
            if (it == other.tensors_.end()) return false;
            if (any.index() != it->second.index()) return false;
            const bool equal = std::visit(
                [&](const auto& a) {
                    const auto& b = std::get<std::decay_t<decltype(a)>>(it->second);
                    return a.shape() == b.shape() && a.data() == b.data();
                },
                any);
            if (!equal) return false;
        }
        return true;
    }

private:
    std::map<std::string, AnyTensor> tensors_;
};

// The full weight-name contract for one BackboneConfig; block indexes are
// zero-based in tensor names.
inline std::vector<std::pair<std::string, Shape>> expected_weights(const BackboneConfig& cfg) {
    cfg.validate();
    const std::size_t e = cfg.embed_dim, h = cfg.hidden_dim();
    const std::size_t patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("patch_embed.weight", Shape{patch_dim, e});
    out.emplace_back("patch_embed.bias", Shape{e});
    out.emplace_back("cls_token", Shape{e});
    out.emplace_back("pos_embed", Shape{cfg.n_tokens(), e});
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        out.emplace_back(p + "ln1.gain", Shape{e});
        out.emplace_back(p + "ln1.bias", Shape{e});
        out.emplace_back(p + "attn.qkv.weight", Shape{e, 3 * e});
        out.emplace_back(p + "attn.qkv.bias", Shape{3 * e});
        out.emplace_back(p + "attn.proj.weight", Shape{e, e});
        out.emplace_back(p + "attn.proj.bias", Shape{e});
        out.emplace_back(p + "ln2.gain", Shape{e});
        out.emplace_back(p + "ln2.bias", Shape{e});
        out.emplace_back(p + "mlp.fc1.weight", Shape{e, h});
        out.emplace_back(p + "mlp.fc1.bias", Shape{h});
        out.emplace_back(p + "mlp.fc2.weight", Shape{h, e});
        out.emplace_back(p + "mlp.fc2.bias", Shape{e});
    }
    out.emplace_back("final_norm.gain", Shape{e});
    out.emplace_back("final_norm.bias", Shape{e});
    return out;
}

// Strict by default: every required name present with the implied shape and
// nothing else. `tolerant` permits extra tensors (e.g. serialized adapters).
inline void validate_weights(const WeightContainer& w, const BackboneConfig& cfg,
                             bool tolerant = false) {
    const auto expected = expected_weights(cfg);
    for (const auto& [name, shape] : expected) {
        if (!w.has(name)) throw DataError("weights: missing tensor '" + name + "'");
        if (w.shape_of(name) != shape)
            throw ShapeError("weights: tensor '" + name + "' has shape " +
                             shape_str(w.shape_of(name)) + ", expected " + shape_str(shape));
    }
    if (!tolerant && w.count() != expected.size())
        throw DataError("weights: container holds " + std::to_string(w.count()) +
                        " tensors, expected exactly " + std::to_string(expected.size()));
}

// Truncated-normal(0, 0.02) weights, zero biases, unit layernorm gains.
template <typename T>
WeightContainer init_random_weights(const BackboneConfig& cfg, Rng& rng) {
    WeightContainer w;
    for (const auto& [name, shape] : expected_weights(cfg)) {
        Tensor<T> t(shape);
        const bool is_bias = name.size() >= 5 && name.rfind(".bias") == name.size() - 5;
        const bool is_ln_gain = name.find("ln1.gain") != std::string::npos ||
                                name.find("ln2.gain") != std::string::npos ||
                                name.find("norm.gain") != std::string::npos;
        if (is_bias) {
            // already zero
        } else if (is_ln_gain) {
            std::fill(t.data().begin(), t.data().end(), T(1));
        } else {
            for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(0.0, 0.02));
        }
        w.set(name, std::move(t));
    }
    return w;
}

// ---------------------------------------------------------------------------
// DIPAW1 container
//   bytes 0-7   magic "DIPAW1\0\0"
//   bytes 8-15  little-endian u64 header length H
//   bytes 16..  UTF-8 JSON: name -> {dtype, shape, offset, nbytes}
//   payload follows the header; offsets are relative to payload start;
//   tensors are row-major little-endian with no padding.
// ---------------------------------------------------------------------------

namespace dipaw1 {

inline constexpr char kMagic[8] = {'D', 'I', 'P', 'A', 'W', '1', '\0', '\0'};

inline void save(const WeightContainer& w, const std::string& path) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, any] : w.tensors()) {
        std::visit(
            [&](const auto& t) {
                using Elem = std::decay_t<decltype(t.data()[0])>;
                const std::uint64_t nbytes = t.size() * sizeof(Elem);
                header[name] = {{"dtype", std::is_same_v<Elem, float> ? "f32" : "f64"},
                                {"shape", t.shape()},
                                {"offset", offset},
                                {"nbytes", nbytes}};
                offset += nbytes;
            },
            any);
    }
    const std::string header_str = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("dipaw1: cannot open '" + path + "' for writing");
    f.write(kMagic, 8);
    const std::uint64_t hlen = header_str.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, any] : w.tensors()) {
        std::visit(
            [&](const auto& t) {
                using Elem = std::decay_t<decltype(t.data()[0])>;
                f.write(reinterpret_cast<const char*>(t.data().data()),
                        static_cast<std::streamsize>(t.size() * sizeof(Elem)));
            },
            any);
    }
    if (!f) throw DataError("dipaw1: write to '" + path + "' failed");
}

inline WeightContainer load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("dipaw1: cannot open '" + path + "'");

    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("dipaw1: bad magic in '" + path + "'");

    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    if (!f) throw DataError("dipaw1: truncated header length in '" + path + "'");

    std::string header_str(hlen, '\0');
    f.read(header_str.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw DataError("dipaw1: truncated header in '" + path + "'");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("dipaw1: malformed header JSON: ") + e.what());
    }

    std::string payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    WeightContainer w;
    for (const auto& [name, meta] : header.items()) {
        const std::string dtype = meta.at("dtype").get<std::string>();
        const Shape shape = meta.at("shape").get<Shape>();
        const std::uint64_t offset = meta.at("offset").get<std::uint64_t>();
        const std::uint64_t nbytes = meta.at("nbytes").get<std::uint64_t>();
        const std::size_t elem_size =
            dtype == "f32" ? sizeof(float) : dtype == "f64" ? sizeof(double) : 0;
        if (elem_size == 0)
            throw DataError("dipaw1: unknown dtype '" + dtype + "' for tensor '" + name + "'");
        if (shape_numel(shape) * elem_size != nbytes)
            throw DataError("dipaw1: header nbytes inconsistent with shape for tensor '" + name +
                            "'");
        if (offset + nbytes > payload.size())
            throw DataError("dipaw1: truncated payload for tensor '" + name + "'");

        if (dtype == "f32") {
            std::vector<float> data(nbytes / sizeof(float));
            std::memcpy(data.data(), payload.data() + offset, nbytes);
            w.set(name, Tensor<float>(shape, std::move(data)));
        } else {
            std::vector<double> data(nbytes / sizeof(double));
            std::memcpy(data.data(), payload.data() + offset, nbytes);
            w.set(name, Tensor<double>(shape, std::move(data)));
        }
    }
    return w;
}

}  // namespace dipaw1

inline void save_weights(const WeightContainer& w, const std::string& path) {
    dipaw1::save(w, path);
}

inline WeightContainer load_weights(const std::string& path) { return dipaw1::load(path); }

}  // namespace dipa
