#include "maskdiff/refine.hpp"

#include <algorithm>

namespace maskdiff::refine {

std::vector<char> detect(const TokenGrid& tokens, std::span<const double> confidences,
                         double threshold) {
  if (confidences.size() != tokens.length()) {
    throw ShapeError("detect: " + std::to_string(confidences.size()) + " confidences for " +
                     std::to_string(tokens.length()) + " frames");
  }
  std::vector<char> flags(confidences.size());
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) {
      throw InvalidInput("detect: confidence at index " + std::to_string(i) + " not in [0, 1]");
    }
    flags[i] = c < threshold;
  }
  return flags;
}

double start_time(const NoiseSchedule& sched, double flagged_fraction) {
  if (!(flagged_fraction >= 0.0 && flagged_fraction <= 1.0)) {
    throw InvalidInput("start_time: flagged fraction not in [0, 1]");
  }
  // Fractions above 1 - eps are out of the schedule's range: start from pure noise.
  if (flagged_fraction >= mask_probability(sched, 1.0)) return 1.0;
  return std::clamp(time_for_mask_probability(sched, flagged_fraction), kMinStartTime, 1.0);
}

TokenGrid refine(const TokenGrid& complete, std::span<const char> flags, const ScoreFn& score_fn,
                 const ConditionBundle& cond, const NoiseSchedule& sched, std::size_t steps,
                 Rng& rng, SamplerDiagnostics* diag) {
  if (flags.size() != complete.length()) throw ShapeError("refine: flags do not match the grid");
  if (complete.has_mask()) throw InvalidInput("refine: input grid contains MASK");
  complete.validate();
  const std::size_t flagged = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1));
  if (flagged == 0) return complete;

  TokenGrid xt = complete;
  for (std::size_t i = 0; i < xt.length(); ++i) {
    if (!flags[i]) continue;
    for (std::size_t r = 0; r < xt.levels(); ++r) xt.at(i, r) = kMask;
  }
  const double t0 =
      start_time(sched, static_cast<double>(flagged) / static_cast<double>(complete.length()));
  TokenGrid out = sample_from(score_fn, cond, std::move(xt), t0, steps, sched, rng, diag);
  // The sampler only ever fills MASK cells; make the contract explicit anyway.
  for (std::size_t i = 0; i < out.length(); ++i) {
    if (flags[i]) continue;
    for (std::size_t r = 0; r < out.levels(); ++r) {
      if (out.at(i, r) != complete.at(i, r)) {
        throw UnreachableState("refine: sampler modified an unflagged cell");
      }
    }
  }
  return out;
}

std::vector<double> frame_confidence(const TokenGrid& complete, const ScoreFn& score_fn,
                                     const ConditionBundle& cond, const NoiseSchedule& sched) {
  if (complete.has_mask()) throw InvalidInput("frame_confidence: input grid contains MASK");
  const double t = time_for_mask_probability(sched, 1.0 / static_cast<double>(complete.length()));
  std::vector<double> conf(complete.length());
  for (std::size_t i = 0; i < complete.length(); ++i) {
    TokenGrid xt = complete;
    for (std::size_t r = 0; r < xt.levels(); ++r) xt.at(i, r) = kMask;
    const ScoreField s = score_fn(xt, cond, t);
    double total = 0.0;
    for (double v : s.cell(i, 0)) total += v;
    conf[i] = total > 0.0 ? s.at(i, 0, complete.at(i, 0)) / total : 0.0;
  }
  return conf;
}

}  // namespace maskdiff::refine
