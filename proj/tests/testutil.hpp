#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "urbansam/core/graph.hpp"
#include "urbansam/core/rng.hpp"
#include "urbansam/core/tensor.hpp"
#include "urbansam/layers.hpp"

namespace testutil {

using urbansam::Graph;
using urbansam::Param;
using urbansam::Rng;
using urbansam::Tensor;
using urbansam::Var;

inline urbansam::Tensor<double> random_tensor(std::vector<Eigen::Index> shape, Rng& rng,
                                              double lo = -1.0, double hi = 1.0) {
    urbansam::Tensor<double> t(std::move(shape));
    for (Eigen::Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline urbansam::Tensor<double> random_binary(std::vector<Eigen::Index> shape, Rng& rng,
                                              double p = 0.5) {
    urbansam::Tensor<double> t(std::move(shape));
    for (Eigen::Index i = 0; i < t.numel(); ++i) t[i] = rng.coin(p) ? 1.0 : 0.0;
    return t;
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;
    bool ok(double tol) const { return max_rel_err <= tol; }
};

// Central finite differences on every element of every listed parameter.
// `loss_fn` must rebuild the graph from the current parameter values.
// Elements that miss `retry_tol` are re-differenced at smaller steps: a relu or
// max-pool kink inside the difference window gives step-size-dependent values
// (and shrinking the window moves it off the kink), while a genuine backward
// bug stays wrong at every step size.
inline GradCheckResult grad_check(std::vector<Param<double>*> params,
                                  const std::function<double()>& loss_fn,
                                  const std::function<void()>& backward_fn, double h = 1e-5,
                                  double retry_tol = 1e-6) {
    for (auto* p : params) p->grad.set_zero();
    backward_fn();
    GradCheckResult res;
    for (auto* p : params) {
        for (Eigen::Index i = 0; i < p->value.numel(); ++i) {
            const double saved = p->value[i];
            const double an = p->grad[i];
            auto rel_at = [&](double step) {
                p->value[i] = saved + step;
                const double lp = loss_fn();
                p->value[i] = saved - step;
                const double lm = loss_fn();
                p->value[i] = saved;
                const double fd = (lp - lm) / (2.0 * step);
                const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
                return std::make_pair(std::abs(fd - an) / denom, fd);
            };
            auto [rel, fd] = rel_at(h);
            for (double step : {h / 8.0, h / 64.0}) {
                if (rel <= retry_tol) break;
                auto [r2, f2] = rel_at(step);
                if (r2 < rel) {
                    rel = r2;
                    fd = f2;
                }
            }
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = p->name + "[" + std::to_string(i) + "] fd=" + std::to_string(fd) +
                            " an=" + std::to_string(an);
            }
        }
    }
    return res;
}

}  // namespace testutil
