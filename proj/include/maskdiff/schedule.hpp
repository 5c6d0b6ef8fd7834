#pragma once

#include <string>

namespace maskdiff {

enum class ScheduleKind { LogLinear };

/// Diffusion-time noise schedule on t in [0, 1].
///
/// The log-linear kind uses sigma_bar(t) = -log(1 - (1 - eps) t), which makes the
/// masked fraction 1 - exp(-sigma_bar(t)) = (1 - eps) t exactly linear in time.
struct NoiseSchedule {
  double eps = 1e-3;
  ScheduleKind kind = ScheduleKind::LogLinear;

  /// Throws DomainError unless eps lies in [0, 1).
  void validate() const;
};

/// sigma_bar(t) = integral of sigma over [0, t]. Requires t in [0, 1].
double cumulative_noise(const NoiseSchedule& sched, double t);

/// sigma(t) = d sigma_bar / dt. Requires 0 <= t < 1 / (1 - eps).
double instantaneous_noise(const NoiseSchedule& sched, double t);

/// 1 - exp(-sigma_bar(t)). Requires t in [0, 1].
double mask_probability(const NoiseSchedule& sched, double t);

/// Inverse of mask_probability: the time whose mask probability is p.
/// Requires p in [0, 1 - eps].
double time_for_mask_probability(const NoiseSchedule& sched, double p);

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

}  // namespace maskdiff
