#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "uavll/common.hpp"
#include "uavll/mlp.hpp"
#include "uavll/uav.hpp"

namespace uavll {

struct UavState {
  int current = -1;  // device the UAV hovers over; -1 before the first visit
  Vec2 location;
  std::vector<double> elapsed;      // slots since each device's current environment began (as known)
  std::vector<double> since_visit;  // slots since the UAV last hovered over each device

  std::size_t device_count() const { return elapsed.size(); }
};

struct UavAction {
  int destination = 0;
  double velocity = 20.0;
  double raw_velocity = 0.0;  // pre-squash velocity draw (actor-critic)
  int action_index = -1;      // discrete action id (Q-network)
};

struct FlightTransition {
  UavState state;
  UavAction action;
  double reward = 0.0;
  UavState next;
  double duration = 0.0;  // slots between the two decisions
};

/// Discount between two decisions: per decision when `per_slots` is 0,
/// otherwise discount^(duration / per_slots).
inline double transition_discount(double discount, double per_slots, const FlightTransition& t) {
  if (per_slots <= 0.0) return discount;
  return std::pow(discount, t.duration / per_slots);
}

struct StateEncoding {
  double side = 1000.0;
  double elapsed_ref = 500.0;
  double elapsed_cap = 4.0;  // normalized elapsed values are clipped to this
};

/// Network input: normalized location followed by normalized elapsed times.
inline Eigen::VectorXd encode_state(const UavState& s, const StateEncoding& enc) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(s.device_count()) + 2);
  x(0) = s.location.x / enc.side;
  x(1) = s.location.y / enc.side;
  for (std::size_t i = 0; i < s.device_count(); ++i)
    x(static_cast<Eigen::Index>(i) + 2) = std::min(s.elapsed[i] / enc.elapsed_ref, enc.elapsed_cap);
  return x;
}

class FlightController {
 public:
  virtual ~FlightController() = default;
  virtual std::string name() const = 0;
  virtual UavAction select(const UavState& state, Rng& rng) = 0;
  virtual void update(const FlightTransition&) {}
  /// Learning controllers stop exploring (and updating) when set to false.
  virtual void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  virtual nlohmann::json describe() const { return {{"controller", name()}}; }

 protected:
  bool training_ = true;
};

class RandomController : public FlightController {
 public:
  explicit RandomController(double velocity = 20.0) : velocity_(velocity) {}
  std::string name() const override { return "random"; }
  UavAction select(const UavState& state, Rng& rng) override {
    if (state.device_count() == 0) throw ArgumentError("no devices to visit");
    UavAction a;
    a.destination = std::uniform_int_distribution<int>(0, static_cast<int>(state.device_count()) - 1)(rng);
    a.velocity = velocity_;
    return a;
  }

 private:
  double velocity_;
};

/// Visits the device that is most overdue relative to its environment period.
class ForceController : public FlightController {
 public:
  ForceController(std::vector<double> periods, double velocity = 20.0)
      : periods_(std::move(periods)), velocity_(velocity) {
    for (double p : periods_)
      if (!(p > 0.0)) throw ArgumentError("change periods must be positive");
  }
  std::string name() const override { return "force"; }
  UavAction select(const UavState& state, Rng&) override {
    if (state.since_visit.size() != periods_.size()) throw ArgumentError("state size does not match periods");
    UavAction a;
    a.velocity = velocity_;
    double best = -1.0;
    for (std::size_t i = 0; i < periods_.size(); ++i) {
      const double ratio = state.since_visit[i] / periods_[i];
      if (ratio > best) {
        best = ratio;
        a.destination = static_cast<int>(i);
      }
    }
    return a;
  }

 private:
  std::vector<double> periods_;
  double velocity_;
};

namespace detail {

inline int valid_excluded(const UavState& s, bool mask_current) {
  return (mask_current && s.device_count() > 1 && s.current >= 0) ? s.current : -1;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

struct ActorCriticConfig {
  int hidden = 64;
  double discount = 0.9;
  double discount_slots = 0.0;  // > 0 discounts by elapsed slots instead of per flight
  double learn_rate = 1e-3;
  double velocity_noise = 0.5;  // std of the pre-squash velocity draw
  double value_coef = 0.5;
  double entropy_coef = 0.0;
  bool hard_clamp_velocity = false;
  bool mask_current = true;  // never choose the device currently hovered over
  VelocityBounds bounds;
  StateEncoding encoding;
};

/// Shared two-layer tanh trunk with destination, velocity and value heads.
class ActorCritic : public FlightController {
 public:
  struct Heads {
    Eigen::VectorXd probs;
    double velocity_mean = 0.0;  // pre-squash
    double value = 0.0;
  };

  ActorCritic(int devices, const ActorCriticConfig& cfg, Rng& rng)
      : n_(devices), cfg_(cfg), net_({devices + 2, cfg.hidden, cfg.hidden, devices + 2}, rng, true) {
    if (devices < 1) throw ArgumentError("actor-critic needs at least one device");
  }

  std::string name() const override { return "ac"; }
  const ActorCriticConfig& config() const { return cfg_; }
  Mlp& network() { return net_; }
  const Mlp& network() const { return net_; }

  Heads heads(const UavState& s, Mlp::Cache* cache = nullptr) const { return heads_with(net_, s, cache); }

  double squash(double pre) const {
    const auto& b = cfg_.bounds;
    if (cfg_.hard_clamp_velocity) return std::clamp(0.5 * (b.v_min + b.v_max) + 0.5 * (b.v_max - b.v_min) * pre, b.v_min, b.v_max);
    return b.v_min + (b.v_max - b.v_min) * detail::sigmoid(pre);
  }

  UavAction select(const UavState& state, Rng& rng) override {
    const Heads h = heads(state);
    UavAction a;
    std::discrete_distribution<int> pick(h.probs.data(), h.probs.data() + h.probs.size());
    a.destination = pick(rng);
    a.raw_velocity = h.velocity_mean;
    if (training_ && cfg_.velocity_noise > 0.0)
      a.raw_velocity += cfg_.velocity_noise * std::normal_distribution<double>(0.0, 1.0)(rng);
    a.velocity = squash(a.raw_velocity);
    return a;
  }

  /// Semi-gradient surrogate whose gradient is the update direction:
  /// -adv * log pi(a|s) + value_coef * 0.5 (target - V(s))^2 - entropy_coef * H.
  /// `target` and `adv` are held fixed.
  double surrogate_loss(const Mlp& net, const FlightTransition& t, double target, double adv) const {
    const Heads h = heads_with(net, t.state, nullptr);
    const double sd = cfg_.velocity_noise > 0.0 ? cfg_.velocity_noise : 1.0;
    const double z = (t.action.raw_velocity - h.velocity_mean) / sd;
    const double logp = std::log(h.probs(t.action.destination)) - 0.5 * z * z;
    double entropy = 0.0;
    for (Eigen::Index i = 0; i < h.probs.size(); ++i)
      if (h.probs(i) > 0.0) entropy -= h.probs(i) * std::log(h.probs(i));
    return -adv * logp + cfg_.value_coef * 0.5 * (target - h.value) * (target - h.value) - cfg_.entropy_coef * entropy;
  }

  double td_target(const FlightTransition& t) const {
    return t.reward + transition_discount(cfg_.discount, cfg_.discount_slots, t) * heads(t.next).value;
  }

  Eigen::VectorXd gradient(const FlightTransition& t, double* target_out = nullptr, double* adv_out = nullptr) const {
    if (!std::isfinite(t.reward)) throw NumericError("non-finite flight reward");
    const double target = td_target(t);
    Mlp::Cache cache;
    const Heads h = heads(t.state, &cache);
    const double adv = target - h.value;
    if (target_out) *target_out = target;
    if (adv_out) *adv_out = adv;

    Eigen::VectorXd d_out = Eigen::VectorXd::Zero(n_ + 2);
    const int excluded = detail::valid_excluded(t.state, cfg_.mask_current);
    double entropy = 0.0;
    for (int i = 0; i < n_; ++i)
      if (h.probs(i) > 0.0) entropy -= h.probs(i) * std::log(h.probs(i));
    for (int i = 0; i < n_; ++i) {
      if (i == excluded) continue;
      const double p = h.probs(i);
      const double onehot = i == t.action.destination ? 1.0 : 0.0;
      d_out(i) = -adv * (onehot - p);
      // dH/dlogit_i = -p_i (log p_i + H)
      if (p > 0.0) d_out(i) += cfg_.entropy_coef * p * (std::log(p) + entropy);
    }
    const double sd = cfg_.velocity_noise > 0.0 ? cfg_.velocity_noise : 1.0;
    d_out(n_) = -adv * (t.action.raw_velocity - h.velocity_mean) / (sd * sd);
    d_out(n_ + 1) = -cfg_.value_coef * (target - h.value);
    return net_.backward(cache, d_out);
  }

  void update(const FlightTransition& t) override {
    if (!std::isfinite(t.reward)) throw NumericError("non-finite flight reward");
    if (!training_ || cfg_.learn_rate == 0.0) return;
    net_.descend(gradient(t), cfg_.learn_rate);
  }

  nlohmann::json describe() const override {
    return {{"controller", name()},
            {"hidden", cfg_.hidden},
            {"discount", cfg_.discount},
            {"learn_rate", cfg_.learn_rate},
            {"velocity_noise", cfg_.velocity_noise}};
  }

 private:
  Heads heads_with(const Mlp& net, const UavState& s, Mlp::Cache* cache) const {
    if (static_cast<int>(s.device_count()) != n_) throw ArgumentError("state size does not match the network");
    const Eigen::VectorXd out = net.forward(encode_state(s, cfg_.encoding), cache);
    const int excluded = detail::valid_excluded(s, cfg_.mask_current);
    Heads h;
    h.probs = Eigen::VectorXd::Zero(n_);
    double top = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_; ++i)
      if (i != excluded) top = std::max(top, out(i));
    double z = 0.0;
    for (int i = 0; i < n_; ++i) {
      if (i == excluded) continue;
      h.probs(i) = std::exp(out(i) - top);
      z += h.probs(i);
    }
    h.probs /= z;
    h.velocity_mean = out(n_);
    h.value = out(n_ + 1);
    return h;
  }

  int n_;
  ActorCriticConfig cfg_;
  Mlp net_;
};

struct QNetConfig {
  int hidden = 64;
  double discount = 0.9;
  double discount_slots = 0.0;
  double learn_rate = 1e-3;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_decay_flights = 3000.0;  // linear decay length
  std::vector<double> velocities{10.0, 20.0, 30.0, 40.0};
  bool mask_current = true;
  StateEncoding encoding;
};

/// One-hidden-layer Q-network over (destination, velocity level) pairs.
class QNetController : public FlightController {
 public:
  QNetController(int devices, const QNetConfig& cfg, Rng& rng)
      : n_(devices),
        cfg_(cfg),
        net_({devices + 2, cfg.hidden, devices * static_cast<int>(cfg.velocities.size())}, rng) {
    if (devices < 1 || cfg.velocities.empty()) throw ArgumentError("Q-network needs devices and velocity levels");
  }

  std::string name() const override { return "qnet"; }
  Mlp& network() { return net_; }
  const Mlp& network() const { return net_; }
  int action_count() const { return n_ * static_cast<int>(cfg_.velocities.size()); }
  int levels() const { return static_cast<int>(cfg_.velocities.size()); }

  double epsilon() const {
    if (!training_) return 0.0;
    const double f = std::min(1.0, static_cast<double>(updates_) / std::max(1.0, cfg_.epsilon_decay_flights));
    return cfg_.epsilon_start + (cfg_.epsilon_end - cfg_.epsilon_start) * f;
  }
  void set_epsilon_progress(long updates) { updates_ = updates; }

  Eigen::VectorXd q_values(const UavState& s, Mlp::Cache* cache = nullptr) const { return q_with(net_, s, cache); }

  bool valid(const UavState& s, int action) const {
    return action / levels() != detail::valid_excluded(s, cfg_.mask_current);
  }

  UavAction decode(int action) const {
    UavAction a;
    a.action_index = action;
    a.destination = action / levels();
    a.velocity = cfg_.velocities[static_cast<std::size_t>(action % levels())];
    return a;
  }

  UavAction select(const UavState& state, Rng& rng) override {
    std::vector<int> actions;
    for (int a = 0; a < action_count(); ++a)
      if (valid(state, a)) actions.push_back(a);
    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < epsilon()) {
      return decode(actions[std::uniform_int_distribution<std::size_t>(0, actions.size() - 1)(rng)]);
    }
    const Eigen::VectorXd q = q_values(state);
    int best = actions.front();
    for (int a : actions)
      if (q(a) > q(best)) best = a;
    return decode(best);
  }

  double td_target(const FlightTransition& t) const {
    const Eigen::VectorXd q = q_values(t.next);
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < action_count(); ++a)
      if (valid(t.next, a)) best = std::max(best, q(a));
    return t.reward + transition_discount(cfg_.discount, cfg_.discount_slots, t) * best;
  }

  /// 0.5 (target - Q(s, a))^2 with the target held fixed.
  double loss(const Mlp& net, const FlightTransition& t, double target) const {
    const double q = q_with(net, t.state, nullptr)(t.action.action_index);
    return 0.5 * (target - q) * (target - q);
  }

  Eigen::VectorXd gradient(const FlightTransition& t, double* target_out = nullptr) const {
    if (!std::isfinite(t.reward)) throw NumericError("non-finite flight reward");
    if (t.action.action_index < 0 || t.action.action_index >= action_count())
      throw ArgumentError("transition has no discrete action");
    const double target = td_target(t);
    if (target_out) *target_out = target;
    Mlp::Cache cache;
    const Eigen::VectorXd q = q_values(t.state, &cache);
    Eigen::VectorXd d_out = Eigen::VectorXd::Zero(action_count());
    d_out(t.action.action_index) = q(t.action.action_index) - target;
    return net_.backward(cache, d_out);
  }

  void update(const FlightTransition& t) override {
    if (!std::isfinite(t.reward)) throw NumericError("non-finite flight reward");
    if (!training_) return;
    ++updates_;
    if (cfg_.learn_rate == 0.0) return;
    net_.descend(gradient(t), cfg_.learn_rate);
  }

  nlohmann::json describe() const override {
    return {{"controller", name()},
            {"hidden", cfg_.hidden},
            {"discount", cfg_.discount},
            {"learn_rate", cfg_.learn_rate},
            {"velocities", cfg_.velocities}};
  }

 private:
  Eigen::VectorXd q_with(const Mlp& net, const UavState& s, Mlp::Cache* cache) const {
    if (static_cast<int>(s.device_count()) != n_) throw ArgumentError("state size does not match the network");
    return net.forward(encode_state(s, cfg_.encoding), cache);
  }

  int n_;
  QNetConfig cfg_;
  Mlp net_;
  long updates_ = 0;
};

}  // namespace uavll
