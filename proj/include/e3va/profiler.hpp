#pragma once

#include "e3va/accountant.hpp"
#include "e3va/train.hpp"

namespace e3va {

struct StepProfile {
    std::string method;
    int64_t trainable_params = 0;  // tables' backbone-scope convention
    int64_t grad_bytes = 0;
    int64_t act_saved_bytes = 0;
    int64_t n_grad_nodes = 0;
    int64_t n_backbone_grad_nodes = 0;
    double step_time_ms = 0.0;  // median of k timed steps after warmup
};

struct ComparisonRow {
    StepProfile p;
    double delta_params_pct = 0.0;
    double delta_mem_pct = 0.0;
    double delta_time_pct = 0.0;
};

struct AblationRow {
    bool trainable_reduction = false;
    bool train_fpn_norm = false;
    int64_t trainable_params = 0;
    double final_loss = 0.0;
    double pixel_acc = 0.0;
};

namespace detail {

template <class Real>
double timed_step(ToyModel<Real>& model, AdamW<Real>& opt, const std::vector<Real>& images,
                  const std::vector<int>& labels, int batch) {
    auto t0 = std::chrono::steady_clock::now();
    Tape<Real> tape;
    Tensor loss = model.loss_of(tape, images, batch, labels);
    tape.mark_closure(loss);
    opt.step(tape.backward(loss));
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

}  // namespace detail

// Byte counts come from TapeStats of one representative backward; wall time
// is the median over k timed steps after warmup.
template <class Real>
StepProfile profile_step(const BackboneConfig& cfg, const MethodConfig& m,
                         const SyntheticDataset<Real>& data, int k = 20,
                         uint64_t seed = 7, int batch = 4) {
    if (k < 5) throw Error("profile_step: k must be >= 5");
    ToyModel<Real> model(cfg, m, data.classes, seed);
    AdamW<Real> opt(model.registry());
    int64_t px = data.pixels() * 3, cl = data.cells();
    int b = std::min(batch, data.n);
    std::vector<Real> images(data.image(0), data.image(0) + b * px);
    std::vector<int> labels(data.labels.begin(), data.labels.begin() + b * cl);

    StepProfile sp;
    sp.method = method_name(m.name);
    sp.trainable_params = model.registry().table_trainable_count();

    for (int i = 0; i < 2; ++i) detail::timed_step(model, opt, images, labels, b);

    {
        Tape<Real> tape;
        Tensor loss = model.loss_of(tape, images, b, labels);
        tape.mark_closure(loss);
        opt.step(tape.backward(loss));
        TapeStats st = tape.stats();
        sp.grad_bytes = st.grad_bytes_total;
        sp.act_saved_bytes = st.activation_bytes_total;
        sp.n_grad_nodes = st.n_grad_nodes;
        sp.n_backbone_grad_nodes = st.n_backbone_grad_nodes;
    }

    std::vector<double> times(k);
    for (int i = 0; i < k; ++i)
        times[i] = detail::timed_step(model, opt, images, labels, b);
    std::sort(times.begin(), times.end());
    sp.step_time_ms = times[k / 2];
    return sp;
}

// One row per requested method with deltas against full fine-tuning. Full is
// profiled as the baseline even when it is not in the list.
template <class Real>
std::vector<ComparisonRow> compare_methods(const BackboneConfig& cfg,
                                           const std::vector<MethodConfig>& methods,
                                           const SyntheticDataset<Real>& data, int k = 20,
                                           uint64_t seed = 7, int batch = 4) {
    if (methods.size() < 2) throw Error("compare_methods: need at least 2 methods");
    std::optional<StepProfile> full;
    std::vector<ComparisonRow> rows;
    for (const auto& m : methods) {
        ComparisonRow r;
        r.p = profile_step(cfg, m, data, k, seed, batch);
        if (m.name == Method::Full) full = r.p;
        rows.push_back(std::move(r));
    }
    if (!full) {
        MethodConfig fm;
        fm.name = Method::Full;
        full = profile_step(cfg, fm, data, k, seed, batch);
    }
    auto pct = [](double v, double base) { return base == 0 ? 0.0 : 100.0 * (v - base) / base; };
    for (auto& r : rows) {
        r.delta_params_pct = pct(double(r.p.trainable_params), double(full->trainable_params));
        r.delta_mem_pct = pct(double(r.p.grad_bytes), double(full->grad_bytes));
        r.delta_time_pct = pct(r.p.step_time_ms, full->step_time_ms);
    }
    return rows;
}

// The 2x2 grid over {trainable_reduction, train_fpn_norm} for e3va.
template <class Real>
std::vector<AblationRow> ablate(const BackboneConfig& cfg, const MethodConfig& base,
                                const SyntheticDataset<Real>& data, int steps = 40,
                                uint64_t seed = 7, int batch = 4) {
    if (base.name != Method::E3va) throw Error("ablate: grid is defined for e3va");
    std::vector<AblationRow> rows;
    for (bool red : {false, true})
        for (bool fpn : {false, true}) {
            MethodConfig m = base;
            m.trainable_reduction = red;
            m.train_fpn_norm = fpn;
            auto run = train(cfg, m, data, steps, seed, batch);
            AblationRow r;
            r.trainable_reduction = red;
            r.train_fpn_norm = fpn;
            r.trainable_params = run.model.registry().table_trainable_count();
            r.final_loss = run.report.loss_curve.empty() ? 0.0 : run.report.loss_curve.back();
            r.pixel_acc = run.report.final_pixel_acc;
            rows.push_back(r);
        }
    return rows;
}

}  // namespace e3va
