#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include <nlohmann/json.hpp>

#include "uavll/common.hpp"

namespace uavll {

/// Rotary-wing propulsion constants. Defaults describe a small quadrotor.
struct PropulsionParams {
  double p0 = 23.661;    // blade profile power (W)
  double pi = 88.627;    // induced power (W)
  double v_tip = 120.0;  // rotor tip speed (m/s)
  double v0 = 4.03;      // mean rotor-induced velocity in hover (m/s)
  double d0 = 0.6;       // fuselage drag ratio
  double s_rotor = 0.05; // rotor solidity
  double rho = 1.225;    // air density (kg/m^3)
  double area = 0.503;   // rotor disc area (m^2)
  // Evaluate the induced term with v0^2 in the inner radical instead of v0^4.
  bool printed_induced_variant = false;

  void validate() const {
    if (!(p0 > 0 && pi > 0 && v_tip > 0 && v0 > 0 && d0 > 0 && s_rotor > 0 && rho > 0 && area > 0))
      throw ConfigError("propulsion parameters must be strictly positive");
  }
};

struct VelocityBounds {
  double v_min = 10.0;
  double v_max = 40.0;
};

inline double power(const PropulsionParams& p, double v) {
  if (!(v >= 0.0)) throw BoundsError("velocity must be non-negative");
  const double v2 = v * v;
  const double blade = p.p0 * (1.0 + 3.0 * v2 / (p.v_tip * p.v_tip));
  const double v0sq = p.v0 * p.v0;
  const double inner_den = p.printed_induced_variant ? 4.0 * v0sq : 4.0 * v0sq * v0sq;
  const double induced = p.pi * std::sqrt(std::sqrt(1.0 + v2 * v2 / inner_den) - v2 / (2.0 * v0sq));
  const double parasite = 0.5 * p.d0 * p.rho * p.s_rotor * p.area * v2 * v;
  return blade + induced + parasite;
}

struct FlightDecision {
  int destination = 0;
  double velocity = 0.0;
  Vec2 origin;
  Vec2 target;
  double distance = 0.0;
  double energy = 0.0;
  std::int64_t travel_slots = 0;
};

inline FlightDecision flight(const PropulsionParams& p, const Vec2& origin, const Vec2& dest, double velocity,
                             double slot_seconds, const VelocityBounds& bounds = {}, int destination = 0) {
  if (!(velocity >= bounds.v_min && velocity <= bounds.v_max))
    throw BoundsError("velocity outside [v_min, v_max]");
  if (!(slot_seconds > 0.0)) throw ArgumentError("slot length must be positive");
  FlightDecision f;
  f.destination = destination;
  f.velocity = velocity;
  f.origin = origin;
  f.target = dest;
  f.distance = distance(origin, dest);
  if (f.distance > 0.0) {
    const double seconds = f.distance / velocity;
    f.energy = seconds * power(p, velocity);
    f.travel_slots = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(seconds / slot_seconds - 1e-12)));
  }
  return f;
}

inline void to_json(nlohmann::json& j, const PropulsionParams& p) {
  j = {{"p0", p.p0},   {"pi", p.pi},         {"v_tip", p.v_tip}, {"v0", p.v0},
       {"d0", p.d0},   {"s_rotor", p.s_rotor}, {"rho", p.rho},   {"area", p.area},
       {"printed_induced_variant", p.printed_induced_variant}};
}

inline void from_json(const nlohmann::json& j, PropulsionParams& p) {
  p.p0 = j.value("p0", p.p0);
  p.pi = j.value("pi", p.pi);
  p.v_tip = j.value("v_tip", p.v_tip);
  p.v0 = j.value("v0", p.v0);
  p.d0 = j.value("d0", p.d0);
  p.s_rotor = j.value("s_rotor", p.s_rotor);
  p.rho = j.value("rho", p.rho);
  p.area = j.value("area", p.area);
  p.printed_induced_variant = j.value("printed_induced_variant", p.printed_induced_variant);
}

}  // namespace uavll
