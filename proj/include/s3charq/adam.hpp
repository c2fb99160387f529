#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "s3charq/autodiff.hpp"
#include "s3charq/errors.hpp"

namespace s3charq::ad {

struct AdamState {
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::uint64_t step_count = 0;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline AdamState make_adam(std::span<const Var> params, double lr) {
    AdamState s;
    s.lr = lr;
    for (const auto& p : params) {
        s.first_moment.emplace_back(p.value().shape, 0.0);
        s.second_moment.emplace_back(p.value().shape, 0.0);
    }
    return s;
}

/// One bias-corrected Adam update from the gradients stored on `params`.
/// A parameter whose gradient is absent or identically zero is left untouched, moments included.
inline void adam_step(std::span<const Var> params, AdamState& state) {
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
        throw ConfigError("adam_step: state holds " + std::to_string(state.first_moment.size()) +
                          " moments for " + std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.first_moment[i].size() != params[i].value().size())
            throw ConfigError("adam_step: moment shape mismatch for " + params[i].name());
        const auto& g = params[i].grad();
        if (!Eigen::Map<const Eigen::ArrayXd>(g.data(), static_cast<Eigen::Index>(g.size())).allFinite())
            throw TrainingError("non-finite gradient in parameter " + params[i].name());
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& grad = params[i].grad();
        const auto n = static_cast<Eigen::Index>(grad.size());
        if (n == 0) continue;
        Eigen::Map<const Eigen::ArrayXd> g(grad.data(), n);
        if ((g == 0.0).all()) continue;
        Eigen::Map<Eigen::ArrayXd> w(params[i].node()->value.data.data(), n);
        Eigen::Map<Eigen::ArrayXd> m(state.first_moment[i].data.data(), n);
        Eigen::Map<Eigen::ArrayXd> v(state.second_moment[i].data.data(), n);
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g * g;
        w -= state.lr * (m / c1) / ((v / c2).sqrt() + state.eps);
    }
}

}  // namespace s3charq::ad
