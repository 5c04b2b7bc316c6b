#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "relattn/params.hpp"
#include "relattn/tensor.hpp"

namespace relattn {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// relative error with a unit floor, so near-zero gradients are compared
// absolutely instead of blowing up the ratio
inline double grad_rel_error(double a, double b) {
    double denom = std::max({1.0, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) / denom;
}

// Central-difference check of reverse-mode gradients. loss_fn must be
// deterministic across calls (dropout off, RReLU at inference slope, batch
// statistics not updated); it is invoked once under a tape for the analytic
// gradients and twice per parameter element for the numeric ones.
inline GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                         ParamStore& params, double eps = 1e-5) {
    params.zero_grads();
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = loss_fn();
        backward(loss, tape);
    }
    analytic.reserve(params.count());
    for (std::size_t p = 0; p < params.count(); ++p) analytic.push_back(params.tensor(p).grad());

    GradCheckResult result;
    for (std::size_t p = 0; p < params.count(); ++p) {
        Tensor& t = params.tensor(p);
        for (std::size_t i = 0; i < t.size(); ++i) {
            double saved = t[i];
            t[i] = saved + eps;
            double f_plus = loss_fn()[0];
            t[i] = saved - eps;
            double f_minus = loss_fn()[0];
            t[i] = saved;
            double numeric = (f_plus - f_minus) / (2.0 * eps);
            double err = grad_rel_error(analytic[p][i], numeric);
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_param = params.name(p);
                result.worst_index = i;
                result.analytic = analytic[p][i];
                result.numeric = numeric;
            }
        }
    }
    params.zero_grads();
    return result;
}

}  // namespace relattn
