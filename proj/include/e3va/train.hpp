#pragma once

#include <chrono>

#include "e3va/data.hpp"
#include "e3va/gradcheck.hpp"
#include "e3va/model.hpp"
#include "e3va/optim.hpp"

namespace e3va {

struct TrainReport {
    std::vector<double> loss_curve;
    double final_pixel_acc = 0.0;
    int steps = 0;
    uint64_t seed = 0;
    std::string method;
    double wall_time_total = 0.0;  // seconds
};

template <class Real>
double evaluate(ToyModel<Real>& model, const SyntheticDataset<Real>& data,
                int batch = 8) {
    int64_t correct = 0, total = 0;
    int64_t cells = data.cells();
    for (int i = 0; i < data.n; i += batch) {
        int b = std::min(batch, data.n - i);
        std::vector<Real> images(data.image(i), data.image(i) + b * data.pixels() * 3);
        Tape<Real> t;
        auto out = model.forward(t, images, b);
        const auto& logits = t.value(out.logits);
        int64_t C = model.classes();
        for (int64_t r = 0; r < b * cells; ++r) {
            const Real* row = logits.data() + r * C;
            int best = 0;
            for (int64_t c = 1; c < C; ++c)
                if (row[c] > row[best]) best = int(c);
            correct += best == data.labels[int64_t(i) * cells + r];
            ++total;
        }
    }
    return double(correct) / double(total);
}

// Predictor-level variant so accuracy bounds can be tested without a model.
template <class Real>
double evaluate_predictor(const std::function<int(int image, int cell)>& predict,
                          const SyntheticDataset<Real>& data) {
    int64_t correct = 0, total = 0;
    for (int i = 0; i < data.n; ++i)
        for (int64_t c = 0; c < data.cells(); ++c) {
            correct += predict(i, int(c)) == data.label(i)[c];
            ++total;
        }
    return double(correct) / double(total);
}

template <class Real>
struct TrainRun {
    TrainReport report;
    ToyModel<Real> model;
};

// Seeded training: data order, init draws, and update order are all
// deterministic functions of the seed.
template <class Real>
TrainRun<Real> train(const BackboneConfig& cfg, const MethodConfig& m,
                     const SyntheticDataset<Real>& data, int steps, uint64_t seed,
                     int batch = 4, AdamWParams hp = {}) {
    if (batch < 1) throw Error("train: batch must be >= 1");
    if (cfg.patch != 4)
        throw Error("train: the dense task labels 4x4 cells; patch must be 4");
    ToyModel<Real> model(cfg, m, data.classes, seed);
    AdamW<Real> opt(model.registry(), hp);

    std::vector<int> order(data.n);
    for (int i = 0; i < data.n; ++i) order[i] = i;
    Rng shuffle(mix_seed(seed, stream::kShuffle));
    for (int i = data.n - 1; i > 0; --i)
        std::swap(order[i], order[size_t(shuffle.uniform() * (i + 1))]);

    TrainReport rep;
    rep.steps = steps;
    rep.seed = seed;
    rep.method = method_name(m.name);
    auto t0 = std::chrono::steady_clock::now();
    int64_t px = data.pixels() * 3, cl = data.cells();
    for (int step = 0; step < steps; ++step) {
        std::vector<Real> images(batch * px);
        std::vector<int> labels(batch * cl);
        for (int j = 0; j < batch; ++j) {
            int idx = order[(int64_t(step) * batch + j) % data.n];
            std::copy(data.image(idx), data.image(idx) + px, images.begin() + j * px);
            std::copy(data.label(idx), data.label(idx) + cl, labels.begin() + j * cl);
        }
        Tape<Real> tape;
        Tensor loss = model.loss_of(tape, images, batch, labels);
        double lv = double(tape.value(loss)[0]);
        if (!std::isfinite(lv))
            throw Error("train: non-finite loss at step " + std::to_string(step));
        tape.mark_closure(loss);
        GradMap<Real> gm;
        try {
            gm = tape.backward(loss);
        } catch (const NonFiniteError& e) {
            throw Error("train: aborted at step " + std::to_string(step) + ": " +
                        e.what());
        }
        opt.step(gm);
        rep.loss_curve.push_back(lv);
    }
    rep.wall_time_total =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.final_pixel_acc = evaluate(model, data);
    return TrainRun<Real>{std::move(rep), std::move(model)};
}

// ---- gradient checking over a built model ----

struct GradCheckGroup {
    std::string name;
    int64_t coords_checked = 0;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

struct GradCheckResult {
    std::vector<GradCheckGroup> groups;
    double worst() const {
        double w = 0;
        for (const auto& g : groups) w = std::max(w, g.max_rel_err);
        return w;
    }
};

// Compares backward against central differences on a single-sample loss.
// Groups with at most `sample_per_group` coordinates are covered exhaustively;
// larger groups are sampled (seeded).
template <class Real>
GradCheckResult gradcheck_model(const BackboneConfig& cfg, const MethodConfig& m,
                                const SyntheticDataset<Real>& data, uint64_t seed,
                                int64_t sample_per_group = 500, Real eps = Real(1e-4)) {
    ToyModel<Real> model(cfg, m, data.classes, seed);
    std::vector<Real> images(data.image(0), data.image(0) + data.pixels() * 3);
    std::vector<int> labels(data.label(0), data.label(0) + data.cells());

    auto eval = [&]() -> Real {
        Tape<Real> t;
        return t.value(model.loss_of(t, images, 1, labels))[0];
    };
    FiniteDiff<Real>::check_deterministic(eval);

    Tape<Real> tape;
    Tensor loss = model.loss_of(tape, images, 1, labels);
    tape.mark_closure(loss);
    GradMap<Real> gm = tape.backward(loss);

    auto& reg = model.registry();
    // bind() reassigns leaf ids on every forward; snapshot the ones gm refers to
    std::vector<Tensor> leaf_of(reg.size());
    for (int i = 0; i < reg.size(); ++i) leaf_of[i] = reg[i].leaf;
    auto group_of = [&](const typename ParamRegistry<Real>::Entry& e) {
        return (e.tag == Tag::Backbone || e.tag == Tag::Adapter) ? std::string("phi_A")
                                                                 : std::string("phi_O");
    };
    std::map<std::string, std::vector<std::pair<int, int64_t>>> coords;
    for (int i = 0; i < reg.size(); ++i)
        if (reg[i].trainable)
            for (int64_t c = 0; c < numel(reg[i].shape); ++c)
                coords[group_of(reg[i])].push_back({i, c});

    GradCheckResult res;
    Rng pick(mix_seed(seed, 0x6fd7));
    for (auto& [name, all] : coords) {
        std::vector<std::pair<int, int64_t>> chosen;
        if (int64_t(all.size()) <= sample_per_group) {
            chosen = all;
        } else {
            std::vector<std::pair<int, int64_t>> pool = all;
            for (int64_t k = 0; k < sample_per_group; ++k) {
                size_t j = k + size_t(pick.uniform() * (pool.size() - k));
                std::swap(pool[k], pool[j]);
                chosen.push_back(pool[k]);
            }
        }
        GradCheckGroup g;
        g.name = name;
        double max_mag = 0.0, max_diff = 0.0;
        for (auto [entry, c] : chosen) {
            double fd = double(FiniteDiff<Real>::coord(eval, reg[entry].value, c, eps));
            double ad = 0.0;
            Tensor leaf = leaf_of[entry];
            if (gm.contains(leaf)) ad = double(gm.at(leaf)[c]);
            max_mag = std::max({max_mag, std::abs(fd), std::abs(ad)});
            max_diff = std::max(max_diff, std::abs(fd - ad));
            ++g.coords_checked;
        }
        g.max_abs_err = max_diff;
        g.max_rel_err = max_diff / std::max(max_mag, 1e-8);
        res.groups.push_back(std::move(g));
    }
    return res;
}

}  // namespace e3va
