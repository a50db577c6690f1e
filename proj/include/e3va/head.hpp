#pragma once

#include "e3va/registry.hpp"

namespace e3va {

struct HeadParams {
    std::vector<int> lat_w, lat_b;  // per-stage laterals to the common width
    int cls_w = -1, cls_b = -1;
};

// Nearest-neighbor upsample from a g x g token grid to a G x G grid, written
// as a constant [G^2, g^2] selection matrix.
template <class Real>
std::vector<Real> upsample_matrix(int64_t fine, int64_t coarse) {
    int64_t f = fine / coarse;
    std::vector<Real> u(fine * fine * coarse * coarse, Real(0));
    for (int64_t y = 0; y < fine; ++y)
        for (int64_t x = 0; x < fine; ++x)
            u[(y * fine + x) * coarse * coarse + (y / f) * coarse + (x / f)] = Real(1);
    return u;
}

// Lateral projections to a common width, upsample to stage-1 resolution,
// elementwise sum, then a per-cell classifier.
template <class Real>
Tensor head_forward(Tape<Real>& t, ParamRegistry<Real>& reg, const HeadParams& p,
                    const std::vector<Tensor>& fused,
                    const std::vector<Tensor>& upsample) {
    if (fused.size() != p.lat_w.size())
        throw Error("head_forward: expected " + std::to_string(p.lat_w.size()) +
                    " stage features, got " + std::to_string(fused.size()));
    Tensor acc;
    {
        typename Tape<Real>::TagScope neck(t, Tag::Neck);
        for (size_t s = 0; s < fused.size(); ++s) {
            Tensor lat =
                t.add(t.matmul(fused[s], reg[p.lat_w[s]].leaf), reg[p.lat_b[s]].leaf);
            if (upsample[s].valid()) lat = t.matmul(upsample[s], lat);
            acc = s == 0 ? lat : t.add(acc, lat);
        }
    }
    typename Tape<Real>::TagScope scope(t, Tag::Head);
    return t.add(t.matmul(acc, reg[p.cls_w].leaf), reg[p.cls_b].leaf);
}

}  // namespace e3va
