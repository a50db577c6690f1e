#pragma once

#include <optional>
#include <string>

#include "e3va/core.hpp"

namespace e3va {

// Hierarchical Swin-style backbone geometry. Stage s (0-based) has channel
// count embed_dim * 2^s and a token grid whose side halves per merge.
struct BackboneConfig {
    std::string name = "custom";
    int embed_dim = 16;
    std::vector<int> depths{1, 1, 2, 1};
    std::vector<int> heads{1, 2, 4, 8};
    int window = 4;
    int patch = 4;
    int img = 64;
    int mlp_ratio = 4;

    int n_stages() const { return int(depths.size()); }
    int64_t dim(int s) const { return int64_t(embed_dim) << s; }
    int64_t grid(int s) const { return (int64_t(img) / patch) >> s; }
    int64_t tokens(int s) const { return grid(s) * grid(s); }
    // Windows shrink to the grid once the grid is no larger than the window.
    int64_t eff_window(int s) const { return std::min<int64_t>(window, grid(s)); }

    void validate() const {
        if (depths.empty() || depths.size() != heads.size())
            throw Error("config: depths/heads must be non-empty and equal length");
        if (patch < 1 || img < 1 || img % patch != 0)
            throw Error("config: image side " + std::to_string(img) +
                        " not divisible by patch " + std::to_string(patch));
        if (window < 1 || embed_dim < 1 || mlp_ratio < 1)
            throw Error("config: window/embed_dim/mlp_ratio must be positive");
        for (int s = 0; s < n_stages(); ++s) {
            if (grid(s) < 1)
                throw Error("config: stage " + std::to_string(s + 1) + " has empty grid");
            if (grid(s) % eff_window(s) != 0)
                throw Error("config: stage " + std::to_string(s + 1) + " grid " +
                            std::to_string(grid(s)) + " not divisible by window " +
                            std::to_string(eff_window(s)));
            if (dim(s) % heads[s] != 0)
                throw Error("config: stage " + std::to_string(s + 1) + " dim " +
                            std::to_string(dim(s)) + " not divisible by heads " +
                            std::to_string(heads[s]));
        }
    }

    static BackboneConfig toy1() {
        BackboneConfig c;
        c.name = "toy-1";
        return c;
    }

    // Small enough for exhaustive finite-difference coverage.
    static BackboneConfig micro1() {
        BackboneConfig c;
        c.name = "micro-1";
        c.embed_dim = 2;
        c.depths = {1, 1, 1, 1};
        c.heads = {1, 1, 2, 4};
        c.window = 4;
        c.patch = 4;
        c.img = 32;
        c.mlp_ratio = 1;
        return c;
    }

    // Accounting-only presets (standard published family values).
    static BackboneConfig swin_b() {
        BackboneConfig c;
        c.name = "swin-b";
        c.embed_dim = 128;
        c.depths = {2, 2, 18, 2};
        c.heads = {4, 8, 16, 32};
        c.window = 7;
        c.patch = 4;
        c.img = 224;
        return c;
    }

    static BackboneConfig swin_l() {
        BackboneConfig c = swin_b();
        c.name = "swin-l";
        c.embed_dim = 192;
        c.heads = {6, 12, 24, 48};
        return c;
    }

    static BackboneConfig preset(const std::string& name) {
        if (name == "toy-1") return toy1();
        if (name == "micro-1") return micro1();
        if (name == "swin-b") return swin_b();
        if (name == "swin-l") return swin_l();
        throw Error("unknown model preset: " + name);
    }

    bool materializable() const { return name != "swin-b" && name != "swin-l"; }
};

enum class Method {
    Full,
    Fixed,
    BitFit,
    Norm,
    Partial1,
    Adapter,
    Lora,
    AdaptFormer,
    E3va,
};

inline const char* method_name(Method m) {
    switch (m) {
        case Method::Full: return "full";
        case Method::Fixed: return "fixed";
        case Method::BitFit: return "bitfit";
        case Method::Norm: return "norm";
        case Method::Partial1: return "partial1";
        case Method::Adapter: return "adapter";
        case Method::Lora: return "lora";
        case Method::AdaptFormer: return "adaptformer";
        case Method::E3va: return "e3va";
    }
    return "?";
}

inline Method method_from_name(const std::string& s) {
    for (Method m : {Method::Full, Method::Fixed, Method::BitFit, Method::Norm,
                     Method::Partial1, Method::Adapter, Method::Lora,
                     Method::AdaptFormer, Method::E3va})
        if (s == method_name(m)) return m;
    throw Error("unknown method: " + s);
}

// How highway features meet the backbone features before the head.
enum class FuseMode { Additive, HighwayOnly };

struct MethodConfig {
    Method name = Method::E3va;
    int alpha = 8;         // e3va low-rank
    int adapter_dim = 64;  // adapter / adaptformer / lora middle dim
    std::optional<bool> train_fpn_norm;
    bool trainable_reduction = false;  // ablation: fresh highway merges
    FuseMode fuse = FuseMode::Additive;

    // The pre-FPN norms are E3VA's design choice; full tuning trains them
    // because it trains everything. Other baselines leave them fixed.
    bool fpn_norm_trainable() const {
        if (train_fpn_norm.has_value()) return *train_fpn_norm;
        return name == Method::E3va || name == Method::Full;
    }

    bool inserts_into_backbone() const {
        return name == Method::Adapter || name == Method::Lora ||
               name == Method::AdaptFormer;
    }

    bool has_highway() const { return name == Method::E3va; }

    void validate() const {
        if (alpha < 1) throw Error("method: alpha must be positive");
        if (adapter_dim < 1) throw Error("method: adapter_dim must be positive");
        if (trainable_reduction && name != Method::E3va)
            throw Error("method: trainable_reduction only applies to e3va");
    }
};

}  // namespace e3va
