#pragma once

#include <optional>

namespace e3va {

// Registry indices for W = s1*t1 + s2*t2 plus bias; never materialized in the
// training path.
struct DualLowRankP {
    int s1 = -1, s2 = -1, t1 = -1, t2 = -1, bias = -1;
    int64_t m = 0, n = 0, alpha = 0;
};

struct E3vaAdapterP {
    DualLowRankP down;  // m -> m/2
    DualLowRankP up;    // m/2 -> m
};

// Dense bottleneck adapter (down m->dim, up dim->m).
struct AdapterP {
    int dw = -1, db = -1, uw = -1, ub = -1;
};

struct AdaptFormerP {
    AdapterP a;
    int scale = -1;  // learnable scalar, shape [1,1]
};

struct LoraP {
    int qa = -1, qb = -1, va = -1, vb = -1;
};

struct FpnNormP {
    int w = -1, b = -1;
};

}  // namespace e3va
