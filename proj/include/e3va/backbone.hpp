#pragma once

#include "e3va/peft_types.hpp"
#include "e3va/registry.hpp"

namespace e3va {

struct PatchEmbedParams {
    int proj = -1, bias = -1, normw = -1, normb = -1;
};

struct BlockParams {
    int ln1w, ln1b;
    int wq, bq, wk, bk, wv, bv, wo, bo;
    int relbias;
    int ln2w, ln2b;
    int w1, b1, w2, b2;
};

struct MergeParams {
    int normw = -1, normb = -1, proj = -1;
};

// One-hot gather that expands the (2w-1)^2 x heads bias table to
// [w^2*w^2, (2w-1)^2] so the expansion stays inside the primitive set.
template <class Real>
std::vector<Real> relpos_gather_data(int w) {
    int64_t w2 = int64_t(w) * w;
    int64_t span = 2 * w - 1;
    std::vector<Real> g(w2 * w2 * span * span, Real(0));
    for (int64_t i = 0; i < w2; ++i)
        for (int64_t j = 0; j < w2; ++j) {
            int64_t dy = (i / w) - (j / w) + w - 1;
            int64_t dx = (i % w) - (j % w) + w - 1;
            g[(i * w2 + j) * span * span + dy * span + dx] = Real(1);
        }
    return g;
}

template <class Real>
struct PatchEmbedOut {
    Tensor pre_norm;  // tokens before the embedding norm
    Tensor tokens;    // [B, (img/patch)^2, embed_dim]
};

// Patch-size linear projection over flattened pixel patches, then norm.
template <class Real>
PatchEmbedOut<Real> patch_embed(Tape<Real>& t, ParamRegistry<Real>& reg,
                                const PatchEmbedParams& p, Tensor image, int patch) {
    Tensor patches = t.window_partition(image, patch);  // [B, nP, p^2, 3]
    const Shape& s = t.shape(patches);
    Shape flat{s.begin(), s.end() - 2};
    flat.push_back(s[s.size() - 2] * s.back());
    Tensor x = t.reshape(patches, flat);
    Tensor pre = t.add(t.matmul(x, reg[p.proj].leaf), reg[p.bias].leaf);
    Tensor tok = t.layernorm(pre, reg[p.normw].leaf, reg[p.normb].leaf);
    return {pre, tok};
}

template <class Real>
struct SublayerOut {
    Tensor xhat;  // normalized input, the parallel-branch feed
    Tensor out;
};

// f_P1: pre-norm windowed multi-head self-attention with relative position
// bias. `gather` is the per-stage one-hot expansion constant.
template <class Real>
SublayerOut<Real> attn_sublayer(Tape<Real>& t, ParamRegistry<Real>& reg,
                                const BlockParams& p, Tensor l, int heads, int window,
                                Tensor gather, const LoraP* lora = nullptr,
                                ParamRegistry<Real>* lora_reg = nullptr) {
    const Shape& ls = t.shape(l);
    int64_t C = ls.back();
    int64_t d = C / heads;
    Tensor xhat = t.layernorm(l, reg[p.ln1w].leaf, reg[p.ln1b].leaf);
    Tensor win = t.window_partition(xhat, window);  // [B, nW, w^2, C]
    const Shape& ws = t.shape(win);
    int64_t nW = ws[ws.size() - 3], w2 = ws[ws.size() - 2];

    auto proj = [&](int wid, int bid, const int* lora_a, const int* lora_b) {
        Tensor y = t.matmul(win, reg[wid].leaf);
        if (lora_a) {
            typename Tape<Real>::TagScope scope(t, Tag::Adapter);
            Tensor lo = t.matmul(t.matmul(win, (*lora_reg)[*lora_a].leaf),
                                 (*lora_reg)[*lora_b].leaf);
            y = t.add(y, lo);
        }
        return t.add(y, reg[bid].leaf);
    };
    Tensor q = proj(p.wq, p.bq, lora ? &lora->qa : nullptr, lora ? &lora->qb : nullptr);
    Tensor k = proj(p.wk, p.bk, nullptr, nullptr);
    Tensor v = proj(p.wv, p.bv, lora ? &lora->va : nullptr, lora ? &lora->vb : nullptr);

    Shape split{ws.begin(), ws.end() - 1};
    split.push_back(heads);
    split.push_back(d);
    auto to_heads = [&](Tensor x) {
        return t.transpose(t.reshape(x, split), {0, 1, 3, 2, 4});  // [B,nW,h,w^2,d]
    };
    Tensor qh = to_heads(q);
    Tensor kh = t.transpose(t.reshape(k, split), {0, 1, 3, 4, 2});  // [B,nW,h,d,w^2]
    Tensor vh = to_heads(v);

    Tensor scores = t.scale(t.matmul(qh, kh), 1.0 / std::sqrt(double(d)));
    // bias table [(2w-1)^2, h] -> [h, w^2, w^2]
    Tensor bias = t.transpose(
        t.reshape(t.matmul(gather, reg[p.relbias].leaf), Shape{w2, w2, heads}),
        {2, 0, 1});
    Tensor attn = t.softmax(t.add(scores, bias), -1);
    Tensor ctx = t.matmul(attn, vh);                         // [B,nW,h,w^2,d]
    Tensor mixed = t.transpose(ctx, {0, 1, 3, 2, 4});        // [B,nW,w^2,h,d]
    Tensor flat = t.reshape(mixed, ws);                      // [B,nW,w^2,C]
    Tensor out = t.add(t.matmul(flat, reg[p.wo].leaf), reg[p.bo].leaf);
    (void)nW;
    return {xhat, t.window_merge(out)};
}

// f_P2: pre-norm two-layer MLP with GeLU.
template <class Real>
SublayerOut<Real> mlp_sublayer(Tape<Real>& t, ParamRegistry<Real>& reg,
                               const BlockParams& p, Tensor u) {
    Tensor xhat = t.layernorm(u, reg[p.ln2w].leaf, reg[p.ln2b].leaf);
    Tensor h = t.gelu(t.add(t.matmul(xhat, reg[p.w1].leaf), reg[p.b1].leaf));
    Tensor out = t.add(t.matmul(h, reg[p.w2].leaf), reg[p.b2].leaf);
    return {xhat, out};
}

template <class Real>
struct BlockIO {
    Tensor l_in;
    Tensor tap1;   // f_P1(l) before any decoration
    Tensor tap2;   // f_P2(u) before any decoration
    Tensor u;      // l + (possibly decorated) tap1
    Tensor l_out;  // u + (possibly decorated) tap2
    Tensor xhat1, xhat2;
};

// 2x2 token concat, norm, bias-free channel reduction 4m -> 2m.
template <class Real>
Tensor patch_merge(Tape<Real>& t, ParamRegistry<Real>& reg, const MergeParams& p,
                   Tensor tokens) {
    const Shape& s = t.shape(tokens);
    int64_t T = s[s.size() - 2], C = s.back();
    int64_t g = int64_t(std::llround(std::sqrt(double(T))));
    if (g * g != T || g % 2 != 0)
        throw ShapeError("patch_merge", "token grid side must be even, got " +
                                            std::to_string(g));
    Tensor grouped = t.window_partition(tokens, 2);  // [..., T/4, 4, C]
    const Shape& gs = t.shape(grouped);
    Shape flat{gs.begin(), gs.end() - 2};
    flat.push_back(4 * C);
    Tensor x = t.reshape(grouped, flat);
    Tensor normed = t.layernorm(x, reg[p.normw].leaf, reg[p.normb].leaf);
    return t.matmul(normed, reg[p.proj].leaf);
}

}  // namespace e3va
