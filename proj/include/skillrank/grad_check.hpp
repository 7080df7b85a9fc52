#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "skillrank/tensor.hpp"

namespace skillrank {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;

    bool passes(double threshold) const { return max_rel_error < threshold; }
};

// Central-difference check of analytic gradients. `params` are wiggled in
// place and restored; `eval` recomputes the scalar loss from their current
// values. Relative error per coordinate is
//   |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
inline GradCheckResult grad_check(
    const std::vector<std::pair<std::string, Tensor*>>& params,
    const std::vector<Tensor>& analytic,
    const std::function<double()>& eval,
    double step) {
    if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
    if (params.size() != analytic.size())
        throw std::invalid_argument("grad_check: analytic gradient count mismatch");
    GradCheckResult res;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& theta = *params[p].second;
        const Tensor& grad = analytic[p];
        if (!theta.same_shape(grad))
            throw std::invalid_argument("grad_check: gradient shape mismatch for " +
                                        params[p].first);
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double saved = theta[i];
            theta[i] = saved + step;
            const double up = eval();
            theta[i] = saved - step;
            const double down = eval();
            theta[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = grad[i];
            const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
            ++res.coordinates;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = params[p].first;
                res.worst_index = i;
            }
        }
    }
    return res;
}

inline GradCheckResult grad_check(Tensor& theta, const Tensor& analytic,
                                  const std::function<double()>& eval, double step) {
    return grad_check({{"theta", &theta}}, {analytic}, eval, step);
}

}  // namespace skillrank
