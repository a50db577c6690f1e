#pragma once

#include "e3va/config.hpp"
#include "e3va/registry.hpp"

namespace e3va {

struct ParamCount {
    int64_t trainable = 0;  // phi_A + phi_O within the counted scope
    int64_t total = 0;
    GroupCounts by_group;
    TagCounts by_tag;
};

// Symbolic counting from configs alone; no weights are allocated. Counts are
// per-term sums over the block/merge structure so the materialized registry
// stays an independent cross-check. Backbone scope by default (the tables'
// asterisk convention); with_head adds neck laterals and the classifier.
class Accountant {
public:
    struct HeadSpec {
        int width = 32;
        int classes = 4;
    };

    static ParamCount count_params(const BackboneConfig& cfg, const MethodConfig& m,
                                   bool with_head = false, HeadSpec head = {}) {
        cfg.validate();
        m.validate();
        ParamCount pc;
        int r = cfg.mlp_ratio;
        int64_t E = cfg.embed_dim;
        int64_t p2 = int64_t(cfg.patch) * cfg.patch;

        // --- backbone tag ---
        int64_t bb_total = 3 * p2 * E + E + 2 * E;  // patch embed proj + norm
        int64_t bb_train = 0;
        switch (m.name) {
            case Method::Full: break;  // filled below as the running total
            case Method::BitFit: bb_train += 2 * E; break;
            case Method::Norm: bb_train += 2 * E; break;
            default: break;
        }
        for (int s = 0; s < cfg.n_stages(); ++s) {
            int64_t C = cfg.dim(s);
            int64_t h = cfg.heads[s];
            int64_t span = 2 * cfg.eff_window(s) - 1;
            int64_t blk = (4 + 2 * r) * C * C + (9 + r) * C + span * span * h;
            bb_total += cfg.depths[s] * blk;
            switch (m.name) {
                case Method::BitFit:
                    bb_train += cfg.depths[s] * ((7 + r) * C + span * span * h);
                    break;
                case Method::Norm: bb_train += cfg.depths[s] * 4 * C; break;
                case Method::Partial1:
                    if (s == cfg.n_stages() - 1) bb_train += blk;
                    break;
                default: break;
            }
            if (s + 1 < cfg.n_stages()) {
                bb_total += 8 * C * C + 8 * C;
                if (m.name == Method::BitFit) bb_train += 4 * C;
                if (m.name == Method::Norm) bb_train += 8 * C;
            }
        }
        if (m.name == Method::Full) bb_train = bb_total;

        // --- adapter tag (inserted structures, all trainable) ---
        int64_t ad = 0;
        for (int s = 0; s < cfg.n_stages(); ++s) {
            int64_t C = cfg.dim(s);
            int64_t d = m.adapter_dim;
            switch (m.name) {
                case Method::Adapter: ad += cfg.depths[s] * 2 * (2 * d * C + d + C); break;
                case Method::AdaptFormer:
                    ad += cfg.depths[s] * (2 * (2 * d * C + d + C) + 2);
                    break;
                case Method::Lora: ad += cfg.depths[s] * 2 * (2 * d * C); break;
                case Method::E3va: ad += cfg.depths[s] * (12 * int64_t(m.alpha) + 3) * C; break;
                default: break;
            }
            if (m.name == Method::E3va && m.trainable_reduction &&
                s + 1 < cfg.n_stages())
                ad += 8 * C * C + 8 * C;
        }

        // --- neck/head tags ---
        int64_t fpn = 0;
        for (int s = 0; s < cfg.n_stages(); ++s) fpn += 2 * cfg.dim(s);
        bool fpn_trained = m.fpn_norm_trainable() || m.name == Method::Full;
        int64_t neck_total = fpn, neck_train = fpn_trained ? fpn : 0;
        int64_t head_total = 0;
        if (with_head) {
            for (int s = 0; s < cfg.n_stages(); ++s)
                neck_total += cfg.dim(s) * head.width + head.width;
            neck_train += neck_total - fpn;
            head_total = int64_t(head.width) * head.classes + head.classes;
        }

        pc.by_tag.backbone = bb_total;
        pc.by_tag.adapter = ad;
        pc.by_tag.neck = neck_total;
        pc.by_tag.head = head_total;
        pc.by_group.phi_a = bb_train + ad;
        pc.by_group.phi_o = neck_train + head_total;
        pc.by_group.phi_f =
            (bb_total - bb_train) + (neck_total - neck_train) + 0;  // head always trains
        pc.trainable = pc.by_group.trainable();
        pc.total = pc.by_group.total();
        return pc;
    }

    struct VerifyReport {
        bool ok = true;
        std::string detail;
    };

    // Symbolic count must equal the materialized registry exactly, group by
    // group and tag by tag.
    template <class Real>
    static VerifyReport verify_against_built(const ParamRegistry<Real>& reg,
                                             const BackboneConfig& cfg,
                                             const MethodConfig& m, HeadSpec head) {
        ParamCount sym = count_params(cfg, m, true, head);
        GroupCounts gm = reg.group_counts();
        TagCounts tm = reg.tag_counts(false);
        VerifyReport rep;
        auto fail = [&](const std::string& what, int64_t a, int64_t b) {
            rep.ok = false;
            rep.detail += what + ": symbolic " + std::to_string(a) + " != materialized " +
                          std::to_string(b) + "; ";
        };
        if (sym.by_group.phi_f != gm.phi_f) fail("phi_F", sym.by_group.phi_f, gm.phi_f);
        if (sym.by_group.phi_a != gm.phi_a) fail("phi_A", sym.by_group.phi_a, gm.phi_a);
        if (sym.by_group.phi_o != gm.phi_o) fail("phi_O", sym.by_group.phi_o, gm.phi_o);
        if (sym.by_tag.backbone != tm.backbone)
            fail("backbone", sym.by_tag.backbone, tm.backbone);
        if (sym.by_tag.adapter != tm.adapter) fail("adapter", sym.by_tag.adapter, tm.adapter);
        if (sym.by_tag.neck != tm.neck) fail("neck", sym.by_tag.neck, tm.neck);
        if (sym.by_tag.head != tm.head) fail("head", sym.by_tag.head, tm.head);
        return rep;
    }
};

}  // namespace e3va
