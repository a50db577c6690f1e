#pragma once

#include <functional>

#include "e3va/head.hpp"
#include "e3va/peft.hpp"

namespace e3va {

// A materialized toy model: backbone + method structures + FPN norms + head.
// Parameter values persist here; every forward binds them onto a fresh tape.
template <class Real>
class ToyModel {
public:
    struct BlockTrace {
        int stage = 0, block = 0;
        Tensor l_in, tap1, tap2, u, l_out;
        Tensor e_in, e_out;  // highway methods only
    };

    struct ForwardOut {
        Tensor loss;    // invalid when no labels were given
        Tensor logits;  // [B, cells, classes]
        std::vector<BlockTrace> blocks;
        std::vector<Tensor> stage_l, stage_e, fused;
    };

    struct Hooks {
        std::function<void(const BlockTrace&)> observe;
        // Extra residual-stream insertion; only inserting methods accept it.
        std::function<Tensor(Tape<Real>&, Tensor)> mutate_tap;
    };

    ToyModel(BackboneConfig cfg, MethodConfig m, int classes, uint64_t seed)
        : cfg_(std::move(cfg)), mcfg_(m), classes_(classes), seed_(seed) {
        cfg_.validate();
        mcfg_.validate();
        build();
        init_values();
    }

    ParamRegistry<Real>& registry() { return reg_; }
    const ParamRegistry<Real>& registry() const { return reg_; }
    const BackboneConfig& config() const { return cfg_; }
    const MethodConfig& method() const { return mcfg_; }
    int classes() const { return classes_; }
    int64_t cells() const { return cfg_.tokens(0); }

    ForwardOut forward(Tape<Real>& t, const std::vector<Real>& images, int batch,
                       const std::vector<int>* labels = nullptr,
                       const Hooks* hooks = nullptr) {
        int64_t img2 = int64_t(cfg_.img) * cfg_.img;
        if (int64_t(images.size()) != batch * img2 * 3)
            throw Error("forward: image buffer does not match batch " +
                        std::to_string(batch));
        const std::function<Tensor(Tape<Real>&, Tensor)>* mutate = nullptr;
        if (hooks && hooks->mutate_tap) {
            if (!mcfg_.inserts_into_backbone())
                throw Error(std::string("forward: hooks cannot mutate the l-stream in ") +
                            method_name(mcfg_.name) + " mode");
            mutate = &hooks->mutate_tap;
        }

        ForwardOut out;
        reg_.bind(t);
        Tensor l, e;
        {
            typename Tape<Real>::TagScope scope(t, Tag::Backbone);
            Tensor im = t.constant(Shape{batch, img2, 3}, images);
            l = patch_embed(t, reg_, pe_, im, cfg_.patch).tokens;
        }
        if (mcfg_.has_highway()) {
            typename Tape<Real>::TagScope scope(t, Tag::Adapter);
            e = t.constant(Shape{batch, cfg_.tokens(0), cfg_.dim(0)},
                           std::vector<Real>(batch * cfg_.tokens(0) * cfg_.dim(0),
                                             Real(0)));
        }

        for (int s = 0; s < cfg_.n_stages(); ++s) {
            StageP& st = stages_[s];
            Tensor gather;
            {
                typename Tape<Real>::TagScope scope(t, Tag::Backbone);
                gather = t.constant(st.gather_shape, st.gather);
            }
            for (int b = 0; b < cfg_.depths[s]; ++b) {
                BlockTrace tr;
                tr.stage = s;
                tr.block = b;
                {
                    typename Tape<Real>::TagScope scope(t, Tag::Backbone);
                    BlockIO<Real> io =
                        block_forward(t, reg_, st.blocks[b], l, cfg_.heads[s],
                                      int(cfg_.eff_window(s)), gather, st.decor[b], mutate);
                    tr.l_in = io.l_in;
                    tr.tap1 = io.tap1;
                    tr.tap2 = io.tap2;
                    tr.u = io.u;
                    tr.l_out = io.l_out;
                    l = io.l_out;
                }
                if (mcfg_.has_highway()) {
                    typename Tape<Real>::TagScope scope(t, Tag::Adapter);
                    tr.e_in = e;
                    e = e3va_highway_step(t, reg_, e, tr.tap1, tr.tap2, st.hw[b].first,
                                          st.hw[b].second);
                    tr.e_out = e;
                }
                if (hooks && hooks->observe) hooks->observe(tr);
                out.blocks.push_back(tr);
            }
            out.stage_l.push_back(l);
            if (mcfg_.has_highway()) out.stage_e.push_back(e);
            if (st.has_merge) {
                {
                    typename Tape<Real>::TagScope scope(t, Tag::Backbone);
                    l = patch_merge(t, reg_, st.merge, l);
                }
                if (mcfg_.has_highway()) {
                    typename Tape<Real>::TagScope scope(t, Tag::Adapter);
                    bool fresh = mcfg_.trainable_reduction;
                    e = highway_merge(t, reg_, fresh ? st.hmerge : st.merge, e,
                                      fresh ? MergeMode::Trainable : MergeMode::Inherited);
                }
            }
        }

        {
            typename Tape<Real>::TagScope scope(t, Tag::Neck);
            for (int s = 0; s < cfg_.n_stages(); ++s) {
                std::optional<Tensor> es;
                if (mcfg_.has_highway()) es = out.stage_e[s];
                out.fused.push_back(
                    stage_fuse(t, reg_, stages_[s].fpn, out.stage_l[s], es, mcfg_.fuse));
            }
        }

        std::vector<Tensor> ups(cfg_.n_stages());
        {
            typename Tape<Real>::TagScope scope(t, Tag::Neck);
            for (int s = 1; s < cfg_.n_stages(); ++s)
                ups[s] = t.constant(stages_[s].upsample_shape, stages_[s].upsample);
        }
        out.logits = head_forward(t, reg_, head_, out.fused, ups);

        if (labels) {
            if (int64_t(labels->size()) != batch * cells())
                throw Error("forward: label count mismatch");
            typename Tape<Real>::TagScope scope(t, Tag::Head);
            out.loss = t.cross_entropy(out.logits, *labels);
        }
        return out;
    }

    // Convenience single-loss entry used by training and gradcheck.
    Tensor loss_of(Tape<Real>& t, const std::vector<Real>& images, int batch,
                   const std::vector<int>& labels) {
        return forward(t, images, batch, &labels).loss;
    }

private:
    struct StageP {
        std::vector<BlockParams> blocks;
        std::vector<BlockMethodP> decor;
        std::vector<std::pair<E3vaAdapterP, E3vaAdapterP>> hw;
        MergeParams merge, hmerge;
        bool has_merge = false;
        FpnNormP fpn;
        std::vector<Real> gather;
        Shape gather_shape;
        std::vector<Real> upsample;
        Shape upsample_shape;
    };

    BackboneConfig cfg_;
    MethodConfig mcfg_;
    int classes_;
    uint64_t seed_;
    ParamRegistry<Real> reg_;
    PatchEmbedParams pe_;
    std::vector<StageP> stages_;
    HeadParams head_;
    std::vector<int> zero_init_;  // entries forced to zero (identity-at-init ups)

    static std::string sb(int s, int b) {
        return "s" + std::to_string(s + 1) + ".b" + std::to_string(b);
    }

    DualLowRankP add_dual(const std::string& prefix, int64_t m, int64_t n, int s, int b) {
        DualLowRankP p;
        p.m = m;
        p.n = n;
        p.alpha = mcfg_.alpha;
        p.s1 = reg_.add(prefix + ".s1", {m, p.alpha}, Tag::Adapter, Role::Weight, s, b);
        p.s2 = reg_.add(prefix + ".s2", {m, p.alpha}, Tag::Adapter, Role::Weight, s, b);
        p.t1 = reg_.add(prefix + ".t1", {p.alpha, n}, Tag::Adapter, Role::Weight, s, b);
        p.t2 = reg_.add(prefix + ".t2", {p.alpha, n}, Tag::Adapter, Role::Weight, s, b);
        p.bias = reg_.add(prefix + ".bias", {n}, Tag::Adapter, Role::Bias, s, b);
        return p;
    }

    AdapterP add_adapter(const std::string& prefix, int64_t m, int s, int b) {
        AdapterP a;
        int64_t dim = mcfg_.adapter_dim;
        a.dw = reg_.add(prefix + ".down.w", {m, dim}, Tag::Adapter, Role::Weight, s, b);
        a.db = reg_.add(prefix + ".down.b", {dim}, Tag::Adapter, Role::Bias, s, b);
        a.uw = reg_.add(prefix + ".up.w", {dim, m}, Tag::Adapter, Role::Weight, s, b);
        a.ub = reg_.add(prefix + ".up.b", {m}, Tag::Adapter, Role::Bias, s, b);
        zero_init_.push_back(a.uw);
        return a;
    }

    void build() {
        int E = cfg_.embed_dim;
        int p2 = cfg_.patch * cfg_.patch;
        pe_.proj = reg_.add("backbone.patch_embed.proj.w", {3 * p2, E}, Tag::Backbone,
                            Role::Weight);
        pe_.bias = reg_.add("backbone.patch_embed.proj.b", {E}, Tag::Backbone, Role::Bias);
        pe_.normw =
            reg_.add("backbone.patch_embed.norm.w", {E}, Tag::Backbone, Role::NormWeight);
        pe_.normb =
            reg_.add("backbone.patch_embed.norm.b", {E}, Tag::Backbone, Role::NormBias);

        stages_.resize(cfg_.n_stages());
        for (int s = 0; s < cfg_.n_stages(); ++s) {
            StageP& st = stages_[s];
            int64_t C = cfg_.dim(s);
            int h = cfg_.heads[s];
            int64_t w = cfg_.eff_window(s);
            int64_t span = (2 * w - 1) * (2 * w - 1);
            for (int b = 0; b < cfg_.depths[s]; ++b) {
                std::string base = "backbone." + sb(s, b) + ".";
                BlockParams bp;
                bp.ln1w = reg_.add(base + "ln1.w", {C}, Tag::Backbone, Role::NormWeight, s, b);
                bp.ln1b = reg_.add(base + "ln1.b", {C}, Tag::Backbone, Role::NormBias, s, b);
                bp.wq = reg_.add(base + "attn.wq", {C, C}, Tag::Backbone, Role::Weight, s, b);
                bp.bq = reg_.add(base + "attn.bq", {C}, Tag::Backbone, Role::Bias, s, b);
                bp.wk = reg_.add(base + "attn.wk", {C, C}, Tag::Backbone, Role::Weight, s, b);
                bp.bk = reg_.add(base + "attn.bk", {C}, Tag::Backbone, Role::Bias, s, b);
                bp.wv = reg_.add(base + "attn.wv", {C, C}, Tag::Backbone, Role::Weight, s, b);
                bp.bv = reg_.add(base + "attn.bv", {C}, Tag::Backbone, Role::Bias, s, b);
                bp.wo = reg_.add(base + "attn.wo", {C, C}, Tag::Backbone, Role::Weight, s, b);
                bp.bo = reg_.add(base + "attn.bo", {C}, Tag::Backbone, Role::Bias, s, b);
                bp.relbias = reg_.add(base + "attn.rel_bias", {span, h}, Tag::Backbone,
                                      Role::RelBias, s, b);
                bp.ln2w = reg_.add(base + "ln2.w", {C}, Tag::Backbone, Role::NormWeight, s, b);
                bp.ln2b = reg_.add(base + "ln2.b", {C}, Tag::Backbone, Role::NormBias, s, b);
                int64_t hid = C * cfg_.mlp_ratio;
                bp.w1 = reg_.add(base + "mlp.w1", {C, hid}, Tag::Backbone, Role::Weight, s, b);
                bp.b1 = reg_.add(base + "mlp.b1", {hid}, Tag::Backbone, Role::Bias, s, b);
                bp.w2 = reg_.add(base + "mlp.w2", {hid, C}, Tag::Backbone, Role::Weight, s, b);
                bp.b2 = reg_.add(base + "mlp.b2", {C}, Tag::Backbone, Role::Bias, s, b);
                st.blocks.push_back(bp);

                BlockMethodP decor;
                std::string mbase = "adapter." + sb(s, b) + ".";
                switch (mcfg_.name) {
                    case Method::Adapter:
                        decor.adapters = {add_adapter(mbase + "ad1", C, s, b),
                                          add_adapter(mbase + "ad2", C, s, b)};
                        break;
                    case Method::AdaptFormer: {
                        AdaptFormerP a1{add_adapter(mbase + "af1", C, s, b),
                                        reg_.add(mbase + "af1.scale", {1, 1}, Tag::Adapter,
                                                 Role::Scale, s, b)};
                        AdaptFormerP a2{add_adapter(mbase + "af2", C, s, b),
                                        reg_.add(mbase + "af2.scale", {1, 1}, Tag::Adapter,
                                                 Role::Scale, s, b)};
                        decor.adaptformer = {a1, a2};
                        break;
                    }
                    case Method::Lora: {
                        LoraP lp;
                        int64_t r = mcfg_.adapter_dim;
                        lp.qa = reg_.add(mbase + "lora_q.a", {C, r}, Tag::Adapter,
                                         Role::Weight, s, b);
                        lp.qb = reg_.add(mbase + "lora_q.b", {r, C}, Tag::Adapter,
                                         Role::Weight, s, b);
                        lp.va = reg_.add(mbase + "lora_v.a", {C, r}, Tag::Adapter,
                                         Role::Weight, s, b);
                        lp.vb = reg_.add(mbase + "lora_v.b", {r, C}, Tag::Adapter,
                                         Role::Weight, s, b);
                        zero_init_.push_back(lp.qb);
                        zero_init_.push_back(lp.vb);
                        decor.lora = lp;
                        break;
                    }
                    case Method::E3va: {
                        if (C % 2 != 0)
                            throw Error("e3va: stage dim must be even for the m/2 bottleneck");
                        E3vaAdapterP a1{add_dual(mbase + "a1.down", C, C / 2, s, b),
                                        add_dual(mbase + "a1.up", C / 2, C, s, b)};
                        E3vaAdapterP a2{add_dual(mbase + "a2.down", C, C / 2, s, b),
                                        add_dual(mbase + "a2.up", C / 2, C, s, b)};
                        st.hw.push_back({a1, a2});
                        break;
                    }
                    default:
                        break;
                }
                st.decor.push_back(decor);
            }

            if (s + 1 < cfg_.n_stages()) {
                st.has_merge = true;
                std::string base = "backbone.s" + std::to_string(s + 1) + ".merge.";
                st.merge.normw =
                    reg_.add(base + "norm.w", {4 * C}, Tag::Backbone, Role::NormWeight, s);
                st.merge.normb =
                    reg_.add(base + "norm.b", {4 * C}, Tag::Backbone, Role::NormBias, s);
                st.merge.proj =
                    reg_.add(base + "proj.w", {4 * C, 2 * C}, Tag::Backbone, Role::Weight, s);
                if (mcfg_.has_highway() && mcfg_.trainable_reduction) {
                    std::string hb = "adapter.s" + std::to_string(s + 1) + ".hmerge.";
                    st.hmerge.normw =
                        reg_.add(hb + "norm.w", {4 * C}, Tag::Adapter, Role::NormWeight, s);
                    st.hmerge.normb =
                        reg_.add(hb + "norm.b", {4 * C}, Tag::Adapter, Role::NormBias, s);
                    st.hmerge.proj =
                        reg_.add(hb + "proj.w", {4 * C, 2 * C}, Tag::Adapter, Role::Weight, s);
                }
            }

            st.fpn.w = reg_.add("neck.fpn_norm.s" + std::to_string(s + 1) + ".w", {C},
                                Tag::Neck, Role::FpnNormWeight, s);
            st.fpn.b = reg_.add("neck.fpn_norm.s" + std::to_string(s + 1) + ".b", {C},
                                Tag::Neck, Role::FpnNormBias, s);

            st.gather = relpos_gather_data<Real>(int(w));
            st.gather_shape = {w * w * w * w, span};
            if (s > 0) {
                st.upsample = upsample_matrix<Real>(cfg_.grid(0), cfg_.grid(s));
                st.upsample_shape = {cfg_.tokens(0), cfg_.tokens(s)};
            }
        }

        int W = head_width_;
        for (int s = 0; s < cfg_.n_stages(); ++s) {
            head_.lat_w.push_back(reg_.add("neck.lateral.s" + std::to_string(s + 1) + ".w",
                                           {cfg_.dim(s), W}, Tag::Neck, Role::Weight, s));
            head_.lat_b.push_back(reg_.add("neck.lateral.s" + std::to_string(s + 1) + ".b",
                                           {W}, Tag::Neck, Role::Bias, s));
        }
        head_.cls_w = reg_.add("head.cls.w", {W, classes_}, Tag::Head, Role::Weight);
        head_.cls_b = reg_.add("head.cls.b", {classes_}, Tag::Head, Role::Bias);

        apply_tuning_policy(reg_, cfg_, mcfg_);
    }

    void init_values() {
        Rng rng_b(mix_seed(seed_, stream::kBackbone));
        Rng rng_m(mix_seed(seed_, stream::kMethod));
        Rng rng_h(mix_seed(seed_, stream::kHead));
        std::vector<char> zero(reg_.size(), 0);
        for (int id : zero_init_) zero[id] = 1;
        for (int i = 0; i < reg_.size(); ++i) {
            auto& e = reg_[i];
            Rng& rng = e.tag == Tag::Backbone ? rng_b
                       : e.tag == Tag::Adapter ? rng_m
                                               : rng_h;
            switch (e.role) {
                case Role::NormWeight:
                case Role::FpnNormWeight:
                    std::fill(e.value.begin(), e.value.end(), Real(1));
                    break;
                case Role::NormBias:
                case Role::FpnNormBias:
                case Role::Bias:
                    break;  // zero
                case Role::Scale:
                    e.value[0] = Real(0.1);
                    break;
                case Role::RelBias:
                    for (auto& v : e.value) v = Real(rng.normal(0.5));
                    break;
                case Role::Weight:
                    if (zero[i]) break;
                    for (auto& v : e.value) v = Real(rng.kaiming(e.shape[0]));
                    break;
            }
        }
    }

    static constexpr int head_width_ = 32;
};

}  // namespace e3va
