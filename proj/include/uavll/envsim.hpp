#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "uavll/common.hpp"

namespace uavll {

/// One stationary environment: arrival probability per slot, packet size
/// distribution (CPU cycles) and the device's hardware constants.
struct EnvironmentParams {
  double lambda = 0.05;
  double a_bar = 3e7;
  double sigma_sq = 2.5e13;
  double kappa = 1e-21;
  double eps_max = 5e6;

  bool valid() const {
    return lambda >= 0.0 && lambda <= 1.0 && a_bar > 0.0 && sigma_sq >= 0.0 &&
           kappa > 0.0 && eps_max > 0.0;
  }
  bool operator==(const EnvironmentParams&) const = default;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Uniform sampling ranges for new environments. kappa and eps_max are
/// properties of the device, so they are drawn once per schedule.
struct ParamRanges {
  Interval lambda{0.02, 0.10};
  Interval a_bar{1e7, 5e7};
  Interval sigma_sq{2.5e13, 2.5e13};
  Interval kappa{1e-21, 1e-21};
  Interval eps_max{3e6, 8e6};

  void validate() const {
    auto check = [](const Interval& r, const char* name, double min_lo) {
      if (!(r.lo <= r.hi)) throw ConfigError(std::string("range '") + name + "' has min > max");
      if (r.lo < min_lo) throw ConfigError(std::string("range '") + name + "' below admissible minimum");
    };
    check(lambda, "lambda", 0.0);
    if (lambda.hi > 1.0) throw ConfigError("range 'lambda' exceeds 1");
    check(a_bar, "a_bar", 0.0);
    if (a_bar.lo <= 0.0) throw ConfigError("range 'a_bar' must be positive");
    check(sigma_sq, "sigma_sq", 0.0);
    check(kappa, "kappa", 0.0);
    if (kappa.lo <= 0.0) throw ConfigError("range 'kappa' must be positive");
    check(eps_max, "eps_max", 0.0);
    if (eps_max.lo <= 0.0) throw ConfigError("range 'eps_max' must be positive");
  }
};

struct Segment {
  std::int64_t start_slot = 0;
  EnvironmentParams params;
};

struct EnvironmentSchedule {
  int device_id = 0;
  std::vector<Segment> segments;
  double duration_mean = 0.0;
  double duration_std = 0.0;
  std::int64_t horizon = 0;

  std::size_t segment_index(std::int64_t slot) const {
    if (slot < 0 || slot >= horizon) throw RangeError("slot outside schedule horizon");
    auto it = std::upper_bound(segments.begin(), segments.end(), slot,
                               [](std::int64_t s, const Segment& seg) { return s < seg.start_slot; });
    return static_cast<std::size_t>(std::distance(segments.begin(), it)) - 1;
  }
};

struct PacketEvent {
  bool arrived = false;
  double size = 0.0;
  std::int64_t generation_slot = 0;
};

namespace detail {
inline double uniform_in(const Interval& r, Rng& rng) {
  if (r.lo == r.hi) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}
}  // namespace detail

inline EnvironmentParams draw_environment(const ParamRanges& ranges, double kappa, double eps_max,
                                          Rng& rng) {
  EnvironmentParams p;
  p.lambda = detail::uniform_in(ranges.lambda, rng);
  p.a_bar = detail::uniform_in(ranges.a_bar, rng);
  p.sigma_sq = detail::uniform_in(ranges.sigma_sq, rng);
  p.kappa = kappa;
  p.eps_max = eps_max;
  return p;
}

inline EnvironmentSchedule build_schedule(int device_id, double duration_mean, double duration_std,
                                          const ParamRanges& ranges, std::int64_t horizon_slots,
                                          std::uint64_t seed) {
  ranges.validate();
  if (horizon_slots < 1) throw ConfigError("horizon must be at least one slot");
  if (!(duration_mean >= 1.0)) throw ConfigError("duration mean must be at least one slot");
  if (!(duration_std >= 0.0)) throw ConfigError("duration std must be non-negative");

  Rng rng = make_rng(seed, 0x5c4ed + static_cast<std::uint64_t>(device_id));
  const double kappa = detail::uniform_in(ranges.kappa, rng);
  const double eps_max = detail::uniform_in(ranges.eps_max, rng);
  std::normal_distribution<double> duration(duration_mean, duration_std);

  EnvironmentSchedule sched;
  sched.device_id = device_id;
  sched.duration_mean = duration_mean;
  sched.duration_std = duration_std;
  sched.horizon = horizon_slots;
  std::int64_t start = 0;
  while (start < horizon_slots) {
    sched.segments.push_back({start, draw_environment(ranges, kappa, eps_max, rng)});
    const double len = duration_std > 0.0 ? duration(rng) : duration_mean;
    start += std::max<std::int64_t>(1, std::llround(len));
  }
  return sched;
}

inline const EnvironmentParams& env_at(const EnvironmentSchedule& schedule, std::int64_t slot) {
  return schedule.segments[schedule.segment_index(slot)].params;
}

/// Bernoulli arrival with a positive Gaussian size (rejection-sampled).
inline PacketEvent sample_packet(const EnvironmentParams& env, std::int64_t slot, Rng& rng) {
  PacketEvent ev;
  ev.generation_slot = slot;
  if (env.lambda <= 0.0) return ev;
  ev.arrived = env.lambda >= 1.0 || std::bernoulli_distribution(env.lambda)(rng);
  if (!ev.arrived) return ev;
  if (env.sigma_sq <= 0.0) {
    ev.size = env.a_bar;
    return ev;
  }
  std::normal_distribution<double> size(env.a_bar, std::sqrt(env.sigma_sq));
  do {
    ev.size = size(rng);
  } while (ev.size <= 0.0);
  return ev;
}

inline void to_json(nlohmann::json& j, const EnvironmentParams& p) {
  j = {{"lambda", p.lambda}, {"a_bar", p.a_bar}, {"sigma_sq", p.sigma_sq},
       {"kappa", p.kappa},   {"eps_max", p.eps_max}};
}

inline void from_json(const nlohmann::json& j, EnvironmentParams& p) {
  p.lambda = j.at("lambda").get<double>();
  p.a_bar = j.at("a_bar").get<double>();
  p.sigma_sq = j.at("sigma_sq").get<double>();
  p.kappa = j.at("kappa").get<double>();
  p.eps_max = j.at("eps_max").get<double>();
}

inline void to_json(nlohmann::json& j, const EnvironmentSchedule& s) {
  j = {{"device_id", s.device_id},
       {"duration_mean", s.duration_mean},
       {"duration_std", s.duration_std},
       {"horizon", s.horizon},
       {"segments", nlohmann::json::array()}};
  for (const auto& seg : s.segments)
    j["segments"].push_back({{"start_slot", seg.start_slot}, {"params", seg.params}});
}

}  // namespace uavll
