#include "maskdiff/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "maskdiff/common.hpp"

namespace maskdiff {
namespace {

void require_unit_time(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw DomainError(std::string(what) + ": t=" + std::to_string(t) + " outside [0, 1]");
  }
}

}  // namespace

void NoiseSchedule::validate() const {
  if (!(eps >= 0.0 && eps < 1.0)) {
    throw DomainError("schedule eps must lie in [0, 1), got " + std::to_string(eps));
  }
}

double cumulative_noise(const NoiseSchedule& sched, double t) {
  sched.validate();
  require_unit_time(t, "cumulative_noise");
  if (t == 0.0) return 0.0;
  // log1p keeps precision for small t; eps=0, t=1 gives +inf as it should.
  return -std::log1p(-(1.0 - sched.eps) * t);
}

double instantaneous_noise(const NoiseSchedule& sched, double t) {
  sched.validate();
  const double denom = 1.0 - (1.0 - sched.eps) * t;
  if (!(t >= 0.0) || !(denom > 0.0)) {
    throw DomainError("instantaneous_noise: singular or negative t=" + std::to_string(t));
  }
  return (1.0 - sched.eps) / denom;
}

double mask_probability(const NoiseSchedule& sched, double t) {
  sched.validate();
  require_unit_time(t, "mask_probability");
  // Equal to -expm1(-sigma_bar(t)); the linear form is exact for log-linear.
  return (1.0 - sched.eps) * t;
}

double time_for_mask_probability(const NoiseSchedule& sched, double p) {
  sched.validate();
  if (!(p >= 0.0 && p <= 1.0 - sched.eps)) {
    throw DomainError("time_for_mask_probability: p=" + std::to_string(p) + " unreachable");
  }
  return std::min(1.0, p / (1.0 - sched.eps));
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::LogLinear:
      return "log_linear";
  }
  return "unknown";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "log_linear") return ScheduleKind::LogLinear;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

}  // namespace maskdiff
