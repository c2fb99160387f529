#pragma once

#include <algorithm>
#include <cmath>

#include "s3charq/autodiff.hpp"
#include "s3charq/errors.hpp"
#include "s3charq/mlp.hpp"

namespace s3charq::ad {

namespace detail {
inline double half_sum_squares(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data) s += v * v;
    return 0.5 * s;
}
}  // namespace detail

/// Compares backprop gradients of 0.5*sum(net(input)^2) against central differences.
/// Returns max over all parameter entries of |a - n| / max(|a|, |n|, 1e-8).
inline double grad_check(const Mlp& net, const Tensor& input, double eps) {
    if (!(eps > 0.0 && eps <= 1e-2)) throw UsageError("grad_check: eps must lie in (0, 1e-2]");
    const auto params = net.parameters();
    zero_grad(params);
    {
        Var out = net.forward(constant(input));
        backward(scale(sum(square(out)), 0.5));
    }
    double worst = 0.0;
    for (const auto& p : params) {
        auto& w = p.node()->value.data;
        const std::vector<double> analytic = p.grad().empty() ? std::vector<double>(w.size(), 0.0) : p.grad();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double saved = w[j];
            w[j] = saved + eps;
            const double up = detail::half_sum_squares(net.infer(input));
            w[j] = saved - eps;
            const double down = detail::half_sum_squares(net.infer(input));
            w[j] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
        }
    }
    zero_grad(params);
    return worst;
}

}  // namespace s3charq::ad
