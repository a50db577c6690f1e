#pragma once

#include <cstring>
#include <functional>

#include "e3va/core.hpp"

namespace e3va {

// Central-difference gradients for an arbitrary scalar evaluation. The
// evaluation reads the parameter arrays in place; coordinates are perturbed
// and restored one at a time.
template <class Real>
struct FiniteDiff {
    using EvalFn = std::function<Real()>;

    static void check_deterministic(const EvalFn& f) {
        Real a = f();
        Real b = f();
        if (std::memcmp(&a, &b, sizeof(Real)) != 0)
            throw Error("finite_diff_grad: model_fn is not deterministic");
    }

    static std::vector<std::vector<Real>> grad(const EvalFn& f,
                                               const std::vector<std::vector<Real>*>& params,
                                               Real eps) {
        if (!(eps > Real(0))) throw Error("finite_diff_grad: eps must be positive");
        check_deterministic(f);
        std::vector<std::vector<Real>> out;
        out.reserve(params.size());
        for (auto* p : params) {
            std::vector<Real> g(p->size());
            for (size_t i = 0; i < p->size(); ++i) g[i] = coord(f, *p, i, eps);
            out.push_back(std::move(g));
        }
        return out;
    }

    // One coordinate; used by the sampled gradcheck over large groups.
    static Real coord(const EvalFn& f, std::vector<Real>& p, size_t i, Real eps) {
        Real keep = p[i];
        p[i] = keep + eps;
        Real fp = f();
        p[i] = keep - eps;
        Real fm = f();
        p[i] = keep;
        return (fp - fm) / (Real(2) * eps);
    }
};

}  // namespace e3va
