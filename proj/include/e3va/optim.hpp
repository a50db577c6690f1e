#pragma once

#include "e3va/autodiff.hpp"
#include "e3va/registry.hpp"

namespace e3va {

struct AdamWParams {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay; moments exist only for trainable entries, frozen
// parameters are never touched.
template <class Real>
class AdamW {
public:
    AdamW(ParamRegistry<Real>& reg, AdamWParams hp = {}) : reg_(reg), hp_(hp) {
        for (int i = 0; i < reg.size(); ++i)
            if (reg[i].trainable) {
                state_[i].m.assign(reg[i].value.size(), Real(0));
                state_[i].v.assign(reg[i].value.size(), Real(0));
            }
    }

    int64_t step_count() const { return t_; }
    bool has_state(int entry) const { return state_.count(entry) > 0; }
    const AdamWParams& hp() const { return hp_; }

    // grads maps tape leaf ids (from the last bind) to gradients.
    void step(const GradMap<Real>& grads) {
        std::map<int, const std::vector<Real>*> by_entry;
        std::map<int, int> leaf_to_entry;
        for (int i = 0; i < reg_.size(); ++i) leaf_to_entry[reg_[i].leaf.id] = i;
        for (const auto& [leaf, g] : grads.by_param) {
            auto it = leaf_to_entry.find(leaf);
            if (it == leaf_to_entry.end() || !reg_[it->second].trainable)
                throw Error("adamw: gradient for a non-trainable parameter (leaf " +
                            std::to_string(leaf) + ")");
            by_entry[it->second] = &g;
        }
        ++t_;
        double bc1 = 1.0 - std::pow(hp_.beta1, double(t_));
        double bc2 = 1.0 - std::pow(hp_.beta2, double(t_));
        for (auto& [entry, gp] : by_entry) {
            auto& e = reg_[entry];
            auto& st = state_[entry];
            const std::vector<Real>& g = *gp;
            for (size_t i = 0; i < g.size(); ++i) {
                double gi = double(g[i]);
                double m = double(st.m[i]) * hp_.beta1 + (1 - hp_.beta1) * gi;
                double v = double(st.v[i]) * hp_.beta2 + (1 - hp_.beta2) * gi * gi;
                st.m[i] = Real(m);
                st.v[i] = Real(v);
                double mhat = m / bc1;
                double vhat = v / bc2;
                double upd = mhat / (std::sqrt(vhat) + hp_.eps) +
                             hp_.weight_decay * double(e.value[i]);
                e.value[i] = Real(double(e.value[i]) - hp_.lr * upd);
            }
        }
    }

private:
    struct State {
        std::vector<Real> m, v;
    };
    ParamRegistry<Real>& reg_;
    AdamWParams hp_;
    std::map<int, State> state_;
    int64_t t_ = 0;
};

}  // namespace e3va
