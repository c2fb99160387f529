#pragma once

#include <optional>

#include "s3charq/errors.hpp"

namespace s3charq {

/// Sparse retransmission reward over (round-1 score, round-2 score, action).
/// Scores are lower-is-better; a score above `threshold` is an outage.
///
///   pre > th, post <= th, a = 1   ->  10.0
///   pre <= th,            a = 0   ->   0.5
///   pre > th, post > th,  a = 1   ->  -0.5
///   pre > th,             a = 0   ->  -5.0
///   pre <= th,            a = 1   ->  -1.0
///
/// `score_r2` must be present exactly when action = 1.
inline double reward(double score_r1, std::optional<double> score_r2, int action, double threshold) {
    if (action != 0 && action != 1) throw UsageError("reward: action must be 0 or 1");
    if (action == 1 && !score_r2) throw UsageError("reward: retransmission without a round-2 score");
    if (action == 0 && score_r2) throw UsageError("reward: round-2 score given without retransmission");
    const bool bad = score_r1 > threshold;
    if (action == 0) return bad ? -5.0 : 0.5;
    if (!bad) return -1.0;
    return *score_r2 <= threshold ? 10.0 : -0.5;
}

}  // namespace s3charq
