#pragma once

// Error-detect-and-infill. Frames whose confidence falls below a threshold
// are masked at every level and regenerated by reverse diffusion started at
// the time whose expected mask fraction equals the flagged fraction.

#include <span>
#include <vector>

#include "maskdiff/diffusion.hpp"
#include "maskdiff/model.hpp"

namespace maskdiff::refine {

inline constexpr double kDefaultThreshold = 0.9;
inline constexpr double kMinStartTime = 1e-3;

/// flag_i = confidence_i < threshold. Throws InvalidInput when a confidence
/// lies outside [0, 1] or the length differs from the grid's.
std::vector<char> detect(const TokenGrid& tokens, std::span<const double> confidences,
                         double threshold = kDefaultThreshold);

/// Reverse start time for a flagged fraction, clamped to [1e-3, 1].
double start_time(const NoiseSchedule& sched, double flagged_fraction);

/// Masks every level of each flagged frame and resamples them; unflagged
/// cells are copied through unchanged. With no flags the input is returned
/// as is.
TokenGrid refine(const TokenGrid& complete, std::span<const char> flags, const ScoreFn& score_fn,
                 const ConditionBundle& cond, const NoiseSchedule& sched, std::size_t steps,
                 Rng& rng, SamplerDiagnostics* diag = nullptr);

/// Network-derived confidence of each frame's level-0 token: mask that frame
/// at every level and normalize the level-0 scores; the confidence is the
/// share of the current token. Evaluated at t = 1/L (one masked frame).
std::vector<double> frame_confidence(const TokenGrid& complete, const ScoreFn& score_fn,
                                     const ConditionBundle& cond, const NoiseSchedule& sched);

}  // namespace maskdiff::refine
