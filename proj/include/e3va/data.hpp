#pragma once

#include "e3va/core.hpp"

namespace e3va {

// Smooth random images with labels derived from local mean color through
// fixed random probes plus a nonlinear term, so a frozen random backbone
// cannot solve the task exactly and adaptation pays off.
template <class Real>
struct SyntheticDataset {
    int n = 0, img = 0, classes = 0;
    uint64_t seed = 0;
    int rule_id = 1;
    std::vector<Real> images;  // [n, img*img, 3], values in [0,1]
    std::vector<int> labels;   // [n, (img/4)^2]

    int64_t pixels() const { return int64_t(img) * img; }
    int64_t cells() const { return (int64_t(img) / 4) * (img / 4); }

    const Real* image(int i) const { return images.data() + i * pixels() * 3; }
    const int* label(int i) const { return labels.data() + i * cells(); }
};

template <class Real>
SyntheticDataset<Real> gen_synthetic(uint64_t seed, int n, int img, int classes,
                                     int rule_id = 1) {
    if (img < 4 || img % 4 != 0) throw Error("gen_synthetic: img must be a multiple of 4");
    if (classes < 2) throw Error("gen_synthetic: need at least 2 classes");
    SyntheticDataset<Real> ds;
    ds.n = n;
    ds.img = img;
    ds.classes = classes;
    ds.seed = seed;
    ds.rule_id = rule_id;
    ds.images.resize(int64_t(n) * img * img * 3);
    ds.labels.resize(int64_t(n) * ds.cells());

    // labeling probes are fixed by (seed, rule), shared across all images
    Rng prng(mix_seed(mix_seed(seed, stream::kData), uint64_t(rule_id)));
    std::vector<double> pw(3 * classes), pb(classes), pu(classes);
    for (auto& v : pw) v = prng.normal();
    for (auto& v : pb) v = 0.25 * prng.normal();
    for (auto& v : pu) v = prng.normal();

    constexpr int kWaves = 4;
    Rng irng(mix_seed(seed, stream::kData + 100));
    for (int i = 0; i < n; ++i) {
        Real* im = ds.images.data() + int64_t(i) * img * img * 3;
        for (int c = 0; c < 3; ++c) {
            double a[kWaves], fx[kWaves], fy[kWaves], ph[kWaves];
            double asum = 0;
            for (int k = 0; k < kWaves; ++k) {
                a[k] = 0.25 + irng.uniform();
                fx[k] = 1 + int(irng.uniform() * 4);
                fy[k] = 1 + int(irng.uniform() * 4);
                ph[k] = irng.uniform(0, 2 * M_PI);
                asum += a[k];
            }
            for (int y = 0; y < img; ++y)
                for (int x = 0; x < img; ++x) {
                    double v = 0;
                    for (int k = 0; k < kWaves; ++k)
                        v += a[k] * std::sin(2 * M_PI * (fx[k] * x + fy[k] * y) / img + ph[k]);
                    im[(int64_t(y) * img + x) * 3 + c] = Real(0.5 + 0.5 * v / asum);
                }
        }
        int cells_side = img / 4;
        int* lab = ds.labels.data() + int64_t(i) * ds.cells();
        for (int cy = 0; cy < cells_side; ++cy)
            for (int cx = 0; cx < cells_side; ++cx) {
                double mu[3] = {0, 0, 0};
                for (int dy = 0; dy < 4; ++dy)
                    for (int dx = 0; dx < 4; ++dx)
                        for (int c = 0; c < 3; ++c)
                            mu[c] += double(
                                im[((int64_t(cy) * 4 + dy) * img + cx * 4 + dx) * 3 + c]);
                for (int c = 0; c < 3; ++c) mu[c] /= 16.0;
                double nonlin = std::sin(3.0 * (mu[0] + mu[1] + mu[2]));
                int best = 0;
                double best_score = -1e300;
                for (int c = 0; c < classes; ++c) {
                    double s = pb[c] + pu[c] * nonlin;
                    for (int k = 0; k < 3; ++k) s += pw[c * 3 + k] * mu[k];
                    if (s > best_score) {
                        best_score = s;
                        best = c;
                    }
                }
                lab[int64_t(cy) * cells_side + cx] = best;
            }
    }
    return ds;
}

}  // namespace e3va
