#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "uavll/common.hpp"
#include "uavll/device.hpp"
#include "uavll/envsim.hpp"
#include "uavll/flightctl.hpp"
#include "uavll/lifelong.hpp"
#include "uavll/policy.hpp"
#include "uavll/uav.hpp"

namespace uavll {

// ---- configuration -----------------------------------------------------------

enum class ControllerKind { ActorCritic, Random, Force, QNet };

inline std::string to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::ActorCritic: return "ac";
    case ControllerKind::Random: return "random";
    case ControllerKind::Force: return "force";
    case ControllerKind::QNet: return "qnet";
  }
  return "?";
}

inline ControllerKind parse_controller(const std::string& s) {
  if (s == "ac") return ControllerKind::ActorCritic;
  if (s == "random") return ControllerKind::Random;
  if (s == "force") return ControllerKind::Force;
  if (s == "qnet") return ControllerKind::QNet;
  throw ConfigError("unknown controller '" + s + "' (expected ac, random, force or qnet)");
}

struct PolicyConfig {
  double sigma_z = 0.2;
  double learn_rate = 0.02;
  int episodes_per_step = 20;
  int budget_episodes = 600;  // base learner budget per visit while training dictionaries
  int episode_slots = 200;
  int finetune_steps = 2;     // gradient steps after a warm start or random restart
  double init_std = 0.1;      // std of random initial theta
  bool pg_restart_on_change = false;  // plain policy gradient restarts from a random theta on a detected change
  FeatureScale scale;
};

struct LifelongConfig {
  LifelongParams params;
  FeatureConfig features;
  double change_threshold = 0.15;
  int window = 200;
  int min_history = 50;  // shorter histories are not used for discovery
  int min_arrivals = 3;  // fewer arrivals leave the device policy untouched
};

struct ControllerConfig {
  ControllerKind kind = ControllerKind::ActorCritic;
  ActorCriticConfig ac;
  QNetConfig qnet;
  double constant_velocity = 20.0;  // random and force baselines
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  int devices = 6;
  double region_side = 1000.0;
  std::uint64_t placement_seed = 7;
  std::vector<double> duration_means;  // per device; empty means evenly spaced over the range below
  double duration_min = 100.0;
  double duration_max = 550.0;
  double duration_std_ratio = 0.1;
  ParamRanges ranges;
  std::int64_t horizon = 3000;
  double slot_seconds = 1.0;
  double beta = 0.03;
  double mu = 0.5;
  PolicyConfig policy;
  LifelongConfig lifelong;
  PropulsionParams propulsion;
  VelocityBounds velocity;
  std::int64_t hover_slots = 1;
  ControllerConfig controller;
  int dictionary_episodes = 3;
  int flight_episodes = 40;
  int evaluation_episodes = 1;

  std::vector<double> device_duration_means() const {
    if (!duration_means.empty()) return duration_means;
    std::vector<double> out;
    for (int i = 0; i < devices; ++i)
      out.push_back(devices == 1 ? duration_min
                                 : duration_min + (duration_max - duration_min) * i / static_cast<double>(devices - 1));
    return out;
  }

  void validate() const {
    if (devices < 1) throw ConfigError("device count must be at least 1");
    if (!(region_side > 0.0)) throw ConfigError("region side must be positive");
    if (!duration_means.empty() && static_cast<int>(duration_means.size()) != devices)
      throw ConfigError("duration_means must list one value per device");
    for (double m : device_duration_means())
      if (!(m >= 1.0)) throw ConfigError("duration means must be at least one slot");
    if (!(duration_min <= duration_max)) throw ConfigError("duration range has min > max");
    if (!(duration_std_ratio >= 0.0)) throw ConfigError("duration std ratio must be non-negative");
    ranges.validate();
    if (horizon < 1) throw ConfigError("horizon must be at least one slot");
    if (!(slot_seconds > 0.0)) throw ConfigError("slot length must be positive");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    if (!(mu >= 0.0)) throw ConfigError("mu must be non-negative");
    if (!(policy.sigma_z > 0.0)) throw ConfigError("sigma_z must be positive");
    if (policy.episodes_per_step < 1 || policy.budget_episodes < 1 || policy.episode_slots < 1)
      throw ConfigError("policy budgets must be positive");
    if (policy.finetune_steps < 0) throw ConfigError("finetune_steps must be non-negative");
    if (lifelong.params.h < 1) throw ConfigError("latent dimension h must be positive");
    if (!(lifelong.params.eta1 >= 0.0 && lifelong.params.eta2 >= 0.0 && lifelong.params.eta3 >= 0.0))
      throw ConfigError("lifelong regularizers must be non-negative");
    if (lifelong.window < 1) throw ConfigError("discovery window must be positive");
    if (lifelong.min_history < 1 || lifelong.min_arrivals < 1)
      throw ConfigError("discovery minimums must be positive");
    propulsion.validate();
    if (!(velocity.v_min > 0.0 && velocity.v_min <= velocity.v_max))
      throw ConfigError("velocity bounds must satisfy 0 < v_min <= v_max");
    if (hover_slots < 1) throw ConfigError("hover must last at least one slot");
    const double cv = controller.constant_velocity;
    if (!(cv >= velocity.v_min && cv <= velocity.v_max)) throw ConfigError("constant velocity outside bounds");
    for (double v : controller.qnet.velocities)
      if (!(v >= velocity.v_min && v <= velocity.v_max)) throw ConfigError("Q-network velocity level outside bounds");
    if (!(controller.ac.discount > 0.0 && controller.ac.discount <= 1.0) ||
        !(controller.qnet.discount > 0.0 && controller.qnet.discount <= 1.0))
      throw ConfigError("discount must lie in (0, 1]");
    if (!(controller.ac.discount_slots >= 0.0)) throw ConfigError("discount_slots must be non-negative");
    if (dictionary_episodes < 0 || flight_episodes < 0 || evaluation_episodes < 1)
      throw ConfigError("episode counts must be non-negative (evaluation at least 1)");
  }
};

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_interval(const nlohmann::json& j, const char* key, Interval& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (v.is_number()) {
    out.lo = out.hi = v.get<double>();
  } else {
    if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("range '") + key + "' must be [min, max]");
    out.lo = v[0].get<double>();
    out.hi = v[1].get<double>();
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError("section '" + where + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    using detail::read_opt;
    detail::reject_unknown(j,
                           {"seed", "devices", "environment", "horizon", "slot_seconds", "cost", "tradeoff_mu", "policy",
                            "lifelong", "uav", "controller", "episodes"},
                           "config");
    read_opt(j, "seed", c.seed);
    read_opt(j, "horizon", c.horizon);
    read_opt(j, "slot_seconds", c.slot_seconds);
    read_opt(j, "tradeoff_mu", c.mu);
    if (j.contains("devices")) {
      const auto& d = j.at("devices");
      detail::reject_unknown(d,
                             {"count", "region_side", "placement_seed", "duration_means", "duration_min",
                              "duration_max", "duration_std_ratio"},
                             "devices");
      read_opt(d, "count", c.devices);
      read_opt(d, "region_side", c.region_side);
      read_opt(d, "placement_seed", c.placement_seed);
      read_opt(d, "duration_means", c.duration_means);
      read_opt(d, "duration_min", c.duration_min);
      read_opt(d, "duration_max", c.duration_max);
      read_opt(d, "duration_std_ratio", c.duration_std_ratio);
    }
    if (j.contains("environment")) {
      const auto& e = j.at("environment");
      detail::reject_unknown(e, {"lambda", "a_bar", "sigma_sq", "kappa", "eps_max"}, "environment");
      detail::read_interval(e, "lambda", c.ranges.lambda);
      detail::read_interval(e, "a_bar", c.ranges.a_bar);
      detail::read_interval(e, "sigma_sq", c.ranges.sigma_sq);
      detail::read_interval(e, "kappa", c.ranges.kappa);
      detail::read_interval(e, "eps_max", c.ranges.eps_max);
    }
    if (j.contains("cost")) {
      detail::reject_unknown(j.at("cost"), {"beta"}, "cost");
      read_opt(j.at("cost"), "beta", c.beta);
    }
    if (j.contains("policy")) {
      const auto& p = j.at("policy");
      detail::reject_unknown(p,
                             {"sigma_z", "learn_rate", "episodes_per_step", "budget_episodes", "episode_slots",
                              "finetune_steps", "init_std", "pg_restart_on_change", "aoi_ref", "backlog_ref"},
                             "policy");
      read_opt(p, "sigma_z", c.policy.sigma_z);
      read_opt(p, "learn_rate", c.policy.learn_rate);
      read_opt(p, "episodes_per_step", c.policy.episodes_per_step);
      read_opt(p, "budget_episodes", c.policy.budget_episodes);
      read_opt(p, "episode_slots", c.policy.episode_slots);
      read_opt(p, "finetune_steps", c.policy.finetune_steps);
      read_opt(p, "init_std", c.policy.init_std);
      read_opt(p, "pg_restart_on_change", c.policy.pg_restart_on_change);
      read_opt(p, "aoi_ref", c.policy.scale.aoi_ref);
      read_opt(p, "backlog_ref", c.policy.scale.backlog_ref);
    }
    if (j.contains("lifelong")) {
      const auto& l = j.at("lifelong");
      detail::reject_unknown(l,
                             {"h", "eta1", "eta2", "eta3", "change_threshold", "window", "min_history", "min_arrivals", "a_ref",
                              "kappa_ref", "eps_ref"},
                             "lifelong");
      read_opt(l, "h", c.lifelong.params.h);
      read_opt(l, "eta1", c.lifelong.params.eta1);
      read_opt(l, "eta2", c.lifelong.params.eta2);
      read_opt(l, "eta3", c.lifelong.params.eta3);
      read_opt(l, "change_threshold", c.lifelong.change_threshold);
      read_opt(l, "window", c.lifelong.window);
      read_opt(l, "min_history", c.lifelong.min_history);
      read_opt(l, "min_arrivals", c.lifelong.min_arrivals);
      read_opt(l, "a_ref", c.lifelong.features.a_ref);
      read_opt(l, "kappa_ref", c.lifelong.features.kappa_ref);
      read_opt(l, "eps_ref", c.lifelong.features.eps_ref);
    }
    if (j.contains("uav")) {
      const auto& u = j.at("uav");
      detail::reject_unknown(u,
                             {"p0", "pi", "v_tip", "v0", "d0", "s_rotor", "rho", "area", "printed_induced_variant",
                              "v_min", "v_max", "hover_slots"},
                             "uav");
      c.propulsion = u.get<PropulsionParams>();
      read_opt(u, "v_min", c.velocity.v_min);
      read_opt(u, "v_max", c.velocity.v_max);
      read_opt(u, "hover_slots", c.hover_slots);
    }
    if (j.contains("controller")) {
      const auto& k = j.at("controller");
      detail::reject_unknown(k,
                             {"kind", "hidden", "discount", "discount_slots", "learn_rate", "velocity_noise", "value_coef",
                              "entropy_coef", "hard_clamp_velocity", "mask_current", "elapsed_ref",
                              "epsilon_start", "epsilon_end", "epsilon_decay_flights", "velocities",
                              "constant_velocity"},
                             "controller");
      if (k.contains("kind")) c.controller.kind = parse_controller(k.at("kind").get<std::string>());
      auto& ac = c.controller.ac;
      auto& q = c.controller.qnet;
      read_opt(k, "hidden", ac.hidden);
      q.hidden = ac.hidden;
      read_opt(k, "discount", ac.discount);
      q.discount = ac.discount;
      read_opt(k, "discount_slots", ac.discount_slots);
      q.discount_slots = ac.discount_slots;
      read_opt(k, "learn_rate", ac.learn_rate);
      q.learn_rate = ac.learn_rate;
      read_opt(k, "velocity_noise", ac.velocity_noise);
      read_opt(k, "value_coef", ac.value_coef);
      read_opt(k, "entropy_coef", ac.entropy_coef);
      read_opt(k, "hard_clamp_velocity", ac.hard_clamp_velocity);
      read_opt(k, "mask_current", ac.mask_current);
      q.mask_current = ac.mask_current;
      read_opt(k, "elapsed_ref", ac.encoding.elapsed_ref);
      read_opt(k, "epsilon_start", q.epsilon_start);
      read_opt(k, "epsilon_end", q.epsilon_end);
      read_opt(k, "epsilon_decay_flights", q.epsilon_decay_flights);
      read_opt(k, "velocities", q.velocities);
      read_opt(k, "constant_velocity", c.controller.constant_velocity);
    }
    if (j.contains("episodes")) {
      const auto& e = j.at("episodes");
      detail::reject_unknown(e, {"dictionary", "flight", "evaluation"}, "episodes");
      read_opt(e, "dictionary", c.dictionary_episodes);
      read_opt(e, "flight", c.flight_episodes);
      read_opt(e, "evaluation", c.evaluation_episodes);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("config schema violation: ") + ex.what());
  }
  // Shared geometry and bounds follow the top-level settings.
  c.controller.ac.bounds = c.velocity;
  c.controller.ac.encoding.side = c.region_side;
  c.controller.qnet.encoding = c.controller.ac.encoding;
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  auto iv = [](const Interval& r) { return nlohmann::json::array({r.lo, r.hi}); };
  nlohmann::json uav = c.propulsion;
  uav["v_min"] = c.velocity.v_min;
  uav["v_max"] = c.velocity.v_max;
  uav["hover_slots"] = c.hover_slots;
  return {
      {"seed", c.seed},
      {"devices",
       {{"count", c.devices},
        {"region_side", c.region_side},
        {"placement_seed", c.placement_seed},
        {"duration_means", c.device_duration_means()},
        {"duration_min", c.duration_min},
        {"duration_max", c.duration_max},
        {"duration_std_ratio", c.duration_std_ratio}}},
      {"environment",
       {{"lambda", iv(c.ranges.lambda)},
        {"a_bar", iv(c.ranges.a_bar)},
        {"sigma_sq", iv(c.ranges.sigma_sq)},
        {"kappa", iv(c.ranges.kappa)},
        {"eps_max", iv(c.ranges.eps_max)}}},
      {"horizon", c.horizon},
      {"slot_seconds", c.slot_seconds},
      {"cost", {{"beta", c.beta}}},
      {"tradeoff_mu", c.mu},
      {"policy",
       {{"sigma_z", c.policy.sigma_z},
        {"learn_rate", c.policy.learn_rate},
        {"episodes_per_step", c.policy.episodes_per_step},
        {"budget_episodes", c.policy.budget_episodes},
        {"episode_slots", c.policy.episode_slots},
        {"finetune_steps", c.policy.finetune_steps},
        {"init_std", c.policy.init_std},
        {"pg_restart_on_change", c.policy.pg_restart_on_change},
        {"aoi_ref", c.policy.scale.aoi_ref},
        {"backlog_ref", c.policy.scale.backlog_ref}}},
      {"lifelong",
       {{"h", c.lifelong.params.h},
        {"eta1", c.lifelong.params.eta1},
        {"eta2", c.lifelong.params.eta2},
        {"eta3", c.lifelong.params.eta3},
        {"change_threshold", c.lifelong.change_threshold},
        {"window", c.lifelong.window},
        {"min_history", c.lifelong.min_history},
        {"min_arrivals", c.lifelong.min_arrivals},
        {"a_ref", c.lifelong.features.a_ref},
        {"kappa_ref", c.lifelong.features.kappa_ref},
        {"eps_ref", c.lifelong.features.eps_ref}}},
      {"uav", uav},
      {"controller",
       {{"kind", to_string(c.controller.kind)},
        {"hidden", c.controller.ac.hidden},
        {"discount", c.controller.ac.discount},
        {"discount_slots", c.controller.ac.discount_slots},
        {"learn_rate", c.controller.ac.learn_rate},
        {"velocity_noise", c.controller.ac.velocity_noise},
        {"value_coef", c.controller.ac.value_coef},
        {"entropy_coef", c.controller.ac.entropy_coef},
        {"hard_clamp_velocity", c.controller.ac.hard_clamp_velocity},
        {"mask_current", c.controller.ac.mask_current},
        {"elapsed_ref", c.controller.ac.encoding.elapsed_ref},
        {"epsilon_start", c.controller.qnet.epsilon_start},
        {"epsilon_end", c.controller.qnet.epsilon_end},
        {"epsilon_decay_flights", c.controller.qnet.epsilon_decay_flights},
        {"velocities", c.controller.qnet.velocities},
        {"constant_velocity", c.controller.constant_velocity}}},
      {"episodes",
       {{"dictionary", c.dictionary_episodes}, {"flight", c.flight_episodes}, {"evaluation", c.evaluation_episodes}}}};
}

/// Reads a JSON file; comments are allowed.
inline nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError("'" + path + "' is not valid JSON: " + ex.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_json(load_json(path)); }

// ---- placement and metrics ----------------------------------------------------

inline std::vector<Vec2> place_devices(int n, double side, std::uint64_t seed) {
  if (n < 1) throw ConfigError("device count must be at least 1");
  if (!(side > 0.0)) throw ConfigError("region side must be positive");
  Rng rng = make_rng(seed, 0x91ace);
  std::uniform_real_distribution<double> u(0.0, side);
  std::vector<Vec2> out;
  for (int i = 0; i < n; ++i) {
    const double x = u(rng);
    out.push_back({x, u(rng)});
  }
  return out;
}

struct SlotRow {
  int episode = 0;
  std::int64_t slot = 0;
  int device = 0;
  std::int64_t aoi = 0;
  double backlog = 0.0;
  double cpu = 0.0;
  double cpu_energy = 0.0;
  double cost = 0.0;
};

struct FlightRow {
  int episode = 0;
  int index = 0;
  int origin = -1;
  int destination = 0;
  Vec2 from, to;
  double velocity = 0.0;
  double distance = 0.0;
  double energy = 0.0;
  std::int64_t depart_slot = 0;
  std::int64_t travel_slots = 0;
  std::int64_t hover_slots = 0;
  std::int64_t slots_advanced = 0;  // device slots simulated during this flight and hover
  bool truncated = false;           // the horizon ended before the flight completed
  bool change_detected = false;
  double device_cost = 0.0;         // (1/N) sum of device cost over the slots advanced
  double reward = 0.0;              // controller reward
};

/// Per-episode totals; every field is recomputable from the slot and flight rows.
struct EpisodeTotals {
  int episode = 0;
  std::int64_t device_slots = 0;
  double cost_sum = 0.0;
  double reward_sum = 0.0;
  double aoi_sum = 0.0;
  double cpu_energy_sum = 0.0;
  double backlog_sum = 0.0;
  double uav_energy = 0.0;
  int flights = 0;
  int detected_envs = 0;
  int true_envs = 0;
  double mu = 0.0;

  double mean_cost() const { return device_slots ? cost_sum / static_cast<double>(device_slots) : 0.0; }
  double mean_reward() const { return device_slots ? reward_sum / static_cast<double>(device_slots) : 0.0; }
  double mean_aoi() const { return device_slots ? aoi_sum / static_cast<double>(device_slots) : 0.0; }
  double mean_cpu_energy() const { return device_slots ? cpu_energy_sum / static_cast<double>(device_slots) : 0.0; }
  double mean_queue() const { return device_slots ? backlog_sum / static_cast<double>(device_slots) : 0.0; }
  /// (1/Z) sum_i sum_t c_i(t) + (mu/M) sum_m e_m with Z the detected environment count.
  double objective() const {
    const double z = std::max(1, detected_envs);
    const double m = std::max(1, flights);
    return cost_sum / z + mu * uav_energy / m;
  }
};

struct RunMetrics {
  std::vector<SlotRow> series;  // only filled when series recording is on
  std::vector<FlightRow> flights;
  std::vector<EpisodeTotals> episodes;

  EpisodeTotals combined() const {
    EpisodeTotals t;
    t.episode = -1;
    for (const auto& e : episodes) {
      t.device_slots += e.device_slots;
      t.cost_sum += e.cost_sum;
      t.reward_sum += e.reward_sum;
      t.aoi_sum += e.aoi_sum;
      t.cpu_energy_sum += e.cpu_energy_sum;
      t.backlog_sum += e.backlog_sum;
      t.uav_energy += e.uav_energy;
      t.flights += e.flights;
      t.detected_envs += e.detected_envs;
      t.true_envs += e.true_envs;
      t.mu = e.mu;
    }
    return t;
  }

  /// Mean device cost over all devices within the slot window [from, to) of each episode.
  double window_mean_cost(std::int64_t from, std::int64_t to) const {
    double acc = 0.0;
    std::int64_t n = 0;
    for (const auto& r : series)
      if (r.slot >= from && r.slot < to) {
        acc += r.cost;
        ++n;
      }
    return n ? acc / static_cast<double>(n) : 0.0;
  }
};

inline nlohmann::json totals_json(const EpisodeTotals& t) {
  return {{"mean_cost", t.mean_cost()},       {"mean_reward", t.mean_reward()},
          {"mean_aoi", t.mean_aoi()},         {"mean_cpu_energy", t.mean_cpu_energy()},
          {"mean_queue", t.mean_queue()},     {"uav_energy", t.uav_energy},
          {"flights", t.flights},             {"detected_environments", t.detected_envs},
          {"true_environments", t.true_envs}, {"objective", t.objective()}};
}

// ---- simulation engine --------------------------------------------------------

/// What the UAV does with a visited device's collected history.
enum class VisitMode {
  LifelongTraining,  // discovery, base learning, dictionary update, install L s
  ZeroShot,          // discovery, zero-shot warm start on change, short fine-tuning
  PlainPolicyGradient,  // discovery, short fine-tuning from the current policy
  None,              // fly only
};

struct DeviceRuntime {
  int id = 0;
  Vec2 position;
  EnvironmentSchedule schedule;
  DeviceState state;
  LinearPolicy policy;
  Rng arrivals;
  Rng actions;
  InteractionHistory log;  // most recent slots, kept to a bounded length
  std::optional<EnvironmentDescriptor> last_descriptor;
  int env_index = -1;  // environments detected so far on this device
};

struct StreamIds {
  static constexpr std::uint64_t kSchedule = 0x100000;
  static constexpr std::uint64_t kArrivals = 0x200000;
  static constexpr std::uint64_t kActions = 0x300000;
  static constexpr std::uint64_t kInitPolicy = 0x400000;
  static constexpr std::uint64_t kLearner = 0x500000;
  static constexpr std::uint64_t kController = 0x600000;
  static constexpr std::uint64_t kControllerInit = 0x700000;
};

/// Episode identifiers: training episodes use small ids, held-out ones a separate range.
inline constexpr int kHeldOutEpisodeBase = 1 << 20;

/// Running means used to put flight energy and the per-slot device cost rate on a common scale.
struct RewardScaler {
  double energy_mean = 0.0;
  double cost_mean = 0.0;
  long count = 0;

  void observe(double energy, double cost) {
    ++count;
    energy_mean += (energy - energy_mean) / static_cast<double>(count);
    cost_mean += (cost - cost_mean) / static_cast<double>(count);
  }
  double reward(double energy, double cost, double mu) const {
    const double e = energy_mean > 0.0 ? energy / energy_mean : 0.0;
    const double c = cost_mean > 0.0 ? cost / cost_mean : 0.0;
    return -(mu * e + c);
  }
};

class Simulation {
 public:
  struct Options {
    int episode = 0;
    VisitMode mode = VisitMode::None;
    bool record_series = false;
    bool learn_controller = false;
  };

  Simulation(const ExperimentConfig& cfg, CoupledDictionaries* dicts, FlightController& controller,
             RewardScaler& scaler, const Options& opt)
      : cfg_(cfg), dicts_(dicts), controller_(controller), scaler_(scaler), opt_(opt) {
    const auto positions = place_devices(cfg.devices, cfg.region_side, cfg.placement_seed);
    const auto means = cfg.device_duration_means();
    const std::uint64_t ep = static_cast<std::uint64_t>(opt.episode);
    for (int i = 0; i < cfg.devices; ++i) {
      const auto id = static_cast<std::uint64_t>(i);
      DeviceRuntime d;
      d.id = i;
      d.position = positions[static_cast<std::size_t>(i)];
      d.schedule = build_schedule(i, means[static_cast<std::size_t>(i)],
                                  cfg.duration_std_ratio * means[static_cast<std::size_t>(i)], cfg.ranges, cfg.horizon,
                                  derive_seed(cfg.seed, StreamIds::kSchedule + ep));
      d.arrivals = make_rng(derive_seed(cfg.seed, StreamIds::kArrivals + ep), id);
      d.actions = make_rng(derive_seed(cfg.seed, StreamIds::kActions + ep), id);
      Rng init = make_rng(derive_seed(cfg.seed, StreamIds::kInitPolicy + ep), id);
      d.policy = random_policy(init);
      if (opt.mode == VisitMode::ZeroShot && dicts && !dicts->absorbed.empty())
        d.policy = prior_policy(*dicts, d.policy);
      devices_.push_back(std::move(d));
    }
    learner_rng_ = make_rng(cfg.seed, StreamIds::kLearner + ep);
    controller_rng_ = make_rng(cfg.seed, StreamIds::kController + ep);
    uav_.elapsed.assign(static_cast<std::size_t>(cfg.devices), 0.0);
    uav_.since_visit.assign(static_cast<std::size_t>(cfg.devices), 0.0);
    totals_.episode = opt.episode;
    totals_.mu = cfg.mu;
    for (const auto& d : devices_) totals_.true_envs += static_cast<int>(d.schedule.segments.size());
  }

  /// Runs the full horizon and returns the episode's metrics.
  RunMetrics run() {
    RunMetrics out;
    while (clock_ < cfg_.horizon) {
      const UavState before = uav_;
      UavAction action = controller_.select(before, controller_rng_);
      FlightRow row = fly(action);
      if (opt_.learn_controller && !row.truncated) {
        const double cost_rate = row.device_cost / static_cast<double>(std::max<std::int64_t>(1, row.slots_advanced));
        scaler_.observe(row.energy, cost_rate);
        row.reward = scaler_.reward(row.energy, cost_rate, cfg_.mu);
        controller_.update({before, action, row.reward, uav_, static_cast<double>(row.slots_advanced)});
      }
      out.flights.push_back(row);
    }
    out.series = std::move(series_);
    totals_.flights = static_cast<int>(out.flights.size());
    for (const auto& d : devices_) totals_.detected_envs += d.env_index + 1;
    out.episodes.push_back(totals_);
    return out;
  }

  const std::vector<DeviceRuntime>& devices() const { return devices_; }
  const UavState& uav() const { return uav_; }

 private:
  LinearPolicy random_policy(Rng& rng) const {
    LinearPolicy p;
    p.sigma_z = cfg_.policy.sigma_z;
    p.scale = cfg_.policy.scale;
    std::normal_distribution<double> n(0.0, cfg_.policy.init_std);
    p.theta = {n(rng), n(rng)};
    return p;
  }

  double advance_slot() {
    double cost_total = 0.0;
    const double beta = cfg_.beta;
    for (auto& d : devices_) {
      const EnvironmentParams& env = env_at(d.schedule, clock_);
      HistoryRecord rec;
      rec.slot = clock_;
      rec.aoi = d.state.aoi;
      rec.backlog = d.state.backlog;
      const ActionSample a = act(d.policy, d.state, env.eps_max, d.actions);
      rec.action = a.cpu;
      rec.raw_action = a.raw;
      const double c = cost(d.state, a.cpu, CostParams{beta, env.kappa});
      rec.reward = -c;
      const PacketEvent pkt = sample_packet(env, clock_, d.arrivals);
      rec.arrived = pkt.arrived;
      rec.arrival_size = pkt.size;
      d.state = step_aoi(step_queue(std::move(d.state), pkt, a.cpu, env.eps_max), clock_);
      rec.backlog_next = d.state.backlog;
      d.log.push(rec);
      const std::size_t cap = 4 * static_cast<std::size_t>(cfg_.lifelong.window);
      if (d.log.records.size() >= 2 * cap) {
        d.log.records.erase(d.log.records.begin(), d.log.records.end() - static_cast<std::ptrdiff_t>(cap));
        d.log.start_slot = d.log.records.front().slot;
      }

      const double e = cpu_energy(a.cpu, env.kappa);
      totals_.device_slots += 1;
      totals_.cost_sum += c;
      totals_.reward_sum -= c;
      totals_.aoi_sum += static_cast<double>(rec.aoi);
      totals_.cpu_energy_sum += e;
      totals_.backlog_sum += rec.backlog;
      if (opt_.record_series) series_.push_back({opt_.episode, clock_, d.id, rec.aoi, rec.backlog, a.cpu, e, c});
      cost_total += c;
    }
    ++clock_;
    return cost_total;
  }

  // Advances up to `slots` slots (bounded by the horizon); returns (slots run, summed cost).
  std::pair<std::int64_t, double> advance(std::int64_t slots) {
    std::int64_t ran = 0;
    double cost_total = 0.0;
    while (ran < slots && clock_ < cfg_.horizon) {
      cost_total += advance_slot();
      ++ran;
    }
    for (auto& e : uav_.elapsed) e += static_cast<double>(ran);
    for (auto& s : uav_.since_visit) s += static_cast<double>(ran);
    return {ran, cost_total};
  }

  FlightRow fly(const UavAction& action) {
    if (action.destination < 0 || action.destination >= cfg_.devices)
      throw ArgumentError("controller chose a device outside the network");
    DeviceRuntime& target = devices_[static_cast<std::size_t>(action.destination)];
    const FlightDecision f = flight(cfg_.propulsion, uav_.location, target.position, action.velocity,
                                    cfg_.slot_seconds, cfg_.velocity, action.destination);
    FlightRow row;
    row.episode = opt_.episode;
    row.index = flight_index_++;
    row.origin = uav_.current;
    row.destination = action.destination;
    row.from = uav_.location;
    row.to = target.position;
    row.velocity = action.velocity;
    row.distance = f.distance;
    row.depart_slot = clock_;
    row.travel_slots = f.travel_slots;
    row.hover_slots = cfg_.hover_slots;

    const auto [travelled, travel_cost] = advance(f.travel_slots);
    double cost_total = travel_cost;
    if (travelled < f.travel_slots) {
      row.truncated = true;
      const double frac = f.travel_slots > 0 ? static_cast<double>(travelled) / static_cast<double>(f.travel_slots) : 0.0;
      row.energy = f.energy * frac;
      row.slots_advanced = travelled;
      uav_.location = {row.from.x + frac * (row.to.x - row.from.x), row.from.y + frac * (row.to.y - row.from.y)};
    } else {
      row.energy = f.energy;
      uav_.location = target.position;
      uav_.current = action.destination;
      row.change_detected = visit(target);
      const auto [hovered, hover_cost] = advance(cfg_.hover_slots);
      cost_total += hover_cost;
      row.slots_advanced = travelled + hovered;
      row.truncated = hovered < cfg_.hover_slots;
    }
    totals_.uav_energy += row.energy;
    row.device_cost = cost_total / static_cast<double>(cfg_.devices);
    return row;
  }

  LinearPolicy finetune(const EnvironmentDescriptor& desc, const LinearPolicy& start) {
    if (cfg_.policy.finetune_steps == 0) return start;
    BaseLearnerOptions opt;
    opt.episodes_per_step = cfg_.policy.episodes_per_step;
    opt.budget_episodes = cfg_.policy.finetune_steps * cfg_.policy.episodes_per_step;
    opt.learn_rate = cfg_.policy.learn_rate;
    const EpisodeSimulator sim{desc.params(), cfg_.beta, cfg_.policy.episode_slots};
    LinearPolicy out = start;
    out.theta = base_learn(sim, start, opt, learner_rng_).alpha;
    return out;
  }

  // The candidate with the higher mean reward in the estimated environment; ties keep `a`.
  LinearPolicy better_of(const EnvironmentDescriptor& desc, const LinearPolicy& a, const LinearPolicy& b) {
    const EpisodeSimulator sim{desc.params(), cfg_.beta, cfg_.policy.episode_slots};
    const std::uint64_t seed = learner_rng_();
    Rng ra(seed), rb(seed);
    const double va = evaluate_policy(sim, a, cfg_.policy.episodes_per_step, ra);
    const double vb = evaluate_policy(sim, b, cfg_.policy.episodes_per_step, rb);
    return vb > va ? b : a;
  }

  // Returns whether a new environment was detected.
  bool visit(DeviceRuntime& d) {
    const std::size_t idx = static_cast<std::size_t>(d.id);
    uav_.since_visit[idx] = 0.0;
    if (opt_.mode == VisitMode::None) return false;
    const InteractionHistory& history = d.log;
    if (static_cast<int>(history.size()) < cfg_.lifelong.min_history) return false;

    const auto& feat = cfg_.lifelong.features;
    const EnvironmentParams& hw = d.schedule.segments.front().params;
    const EnvironmentDescriptor desc =
        discover(history.tail(static_cast<std::size_t>(cfg_.lifelong.window)), hw.kappa, hw.eps_max, feat);
    const bool changed =
        !d.last_descriptor || detect_change(*d.last_descriptor, desc, cfg_.lifelong.change_threshold);
    if (changed) {
      ++d.env_index;
      uav_.elapsed[idx] = static_cast<double>(estimate_change_age(
          history, static_cast<std::size_t>(cfg_.lifelong.window), cfg_.lifelong.change_threshold, hw.kappa,
          hw.eps_max, feat));
    }
    d.last_descriptor = desc;
    if (desc.low_confidence || static_cast<int>(desc.arrivals) < cfg_.lifelong.min_arrivals) return changed;

    switch (opt_.mode) {
      case VisitMode::LifelongTraining: {
        BaseLearnerOptions opt;
        opt.episodes_per_step = cfg_.policy.episodes_per_step;
        opt.budget_episodes = cfg_.policy.budget_episodes;
        opt.learn_rate = cfg_.policy.learn_rate;
        const EpisodeSimulator sim{desc.params(), cfg_.beta, cfg_.policy.episode_slots};
        const BaseLearnerResult res = base_learn(sim, d.policy, opt, learner_rng_);
        const SparseCode code = absorb_environment(*dicts_, {d.id + opt_.episode * cfg_.devices, d.env_index},
                                                   res.alpha, res.hessian, desc.phi, changed, cfg_.lifelong.params);
        d.policy.theta = dicts_->L * code.s;
        break;
      }
      case VisitMode::ZeroShot: {
        LinearPolicy start = d.policy;
        if (changed) start = better_of(desc, zero_shot(*dicts_, desc, cfg_.lifelong.params, d.policy), d.policy);
        d.policy = finetune(desc, start);
        break;
      }
      case VisitMode::PlainPolicyGradient: {
        LinearPolicy start = d.policy;
        if (changed && cfg_.policy.pg_restart_on_change) start = random_policy(learner_rng_);
        d.policy = finetune(desc, start);
        break;
      }
      case VisitMode::None: break;
    }
    return changed;
  }

  const ExperimentConfig& cfg_;
  CoupledDictionaries* dicts_;
  FlightController& controller_;
  RewardScaler& scaler_;
  Options opt_;
  std::vector<DeviceRuntime> devices_;
  UavState uav_;
  std::int64_t clock_ = 0;
  int flight_index_ = 0;
  Rng learner_rng_;
  Rng controller_rng_;
  EpisodeTotals totals_;
  std::vector<SlotRow> series_;
};

// ---- phases --------------------------------------------------------------------

inline std::unique_ptr<FlightController> make_controller(const ExperimentConfig& cfg, ControllerKind kind) {
  Rng init = make_rng(cfg.seed, StreamIds::kControllerInit);
  switch (kind) {
    case ControllerKind::ActorCritic: return std::make_unique<ActorCritic>(cfg.devices, cfg.controller.ac, init);
    case ControllerKind::Random: return std::make_unique<RandomController>(cfg.controller.constant_velocity);
    case ControllerKind::Force:
      return std::make_unique<ForceController>(cfg.device_duration_means(), cfg.controller.constant_velocity);
    case ControllerKind::QNet: return std::make_unique<QNetController>(cfg.devices, cfg.controller.qnet, init);
  }
  throw ConfigError("unknown controller");
}

inline void append(RunMetrics& into, RunMetrics&& from) {
  into.series.insert(into.series.end(), from.series.begin(), from.series.end());
  into.flights.insert(into.flights.end(), from.flights.begin(), from.flights.end());
  into.episodes.insert(into.episodes.end(), from.episodes.begin(), from.episodes.end());
}

struct TrainingResult {
  CoupledDictionaries dicts;
  RunMetrics metrics;
};

/// Phase 1: random flights, dictionaries learned from every visit.
inline TrainingResult run_training(const ExperimentConfig& cfg, bool record_series = false) {
  cfg.validate();
  TrainingResult out{CoupledDictionaries::zeros(kPolicyDim, kFeatureDim, cfg.lifelong.params.h), {}};
  RandomController flights(cfg.controller.constant_velocity);
  RewardScaler scaler;
  for (int e = 0; e < cfg.dictionary_episodes; ++e) {
    Simulation sim(cfg, &out.dicts, flights, scaler, {e, VisitMode::LifelongTraining, record_series, false});
    append(out.metrics, sim.run());
  }
  return out;
}

/// Held-out evaluation with device updates by zero-shot transfer (or plain
/// policy gradient when `mode` says so) under the given flight controller.
inline RunMetrics run_testing(const ExperimentConfig& cfg, const CoupledDictionaries& dicts,
                              VisitMode mode = VisitMode::ZeroShot, FlightController* controller = nullptr,
                              bool record_series = true) {
  cfg.validate();
  if (mode == VisitMode::ZeroShot && dicts.env_count < 1)
    throw StateError("testing with zero-shot transfer needs trained dictionaries");
  if (mode == VisitMode::LifelongTraining) throw ArgumentError("testing does not update dictionaries");
  RandomController fallback(cfg.controller.constant_velocity);
  FlightController& ctl = controller ? *controller : fallback;
  const bool was_training = ctl.training();
  ctl.set_training(false);
  CoupledDictionaries copy = dicts;
  RewardScaler scaler;
  RunMetrics out;
  for (int e = 0; e < cfg.evaluation_episodes; ++e) {
    Simulation sim(cfg, &copy, ctl, scaler, {kHeldOutEpisodeBase + e, mode, record_series, false});
    append(out, sim.run());
  }
  ctl.set_training(was_training);
  return out;
}

struct FlightTrainingResult {
  std::unique_ptr<FlightController> controller;
  RunMetrics training;    // per-episode totals while learning
  RunMetrics evaluation;  // held-out episodes with the learned controller
};

/// Phase 2: devices updated by zero-shot transfer while the controller learns per flight.
inline FlightTrainingResult run_flight_training(const ExperimentConfig& cfg, const CoupledDictionaries& dicts,
                                                ControllerKind kind, bool record_series = true) {
  cfg.validate();
  if (dicts.env_count < 1) throw StateError("flight training needs trained dictionaries");
  FlightTrainingResult out;
  out.controller = make_controller(cfg, kind);
  CoupledDictionaries copy = dicts;
  RewardScaler scaler;
  const bool learns = kind == ControllerKind::ActorCritic || kind == ControllerKind::QNet;
  out.controller->set_training(learns);
  for (int e = 0; e < cfg.flight_episodes; ++e) {
    Simulation sim(cfg, &copy, *out.controller, scaler, {e, VisitMode::ZeroShot, false, learns});
    append(out.training, sim.run());
  }
  out.evaluation = run_testing(cfg, dicts, VisitMode::ZeroShot, out.controller.get(), record_series);
  return out;
}

/// k-fold selection of the latent dimension h from a set of absorbed tasks:
/// the score is the mean Gamma-weighted error of zero-shot policies on held-out tasks.
inline int cross_validate_h(const std::vector<Contribution>& tasks, const std::vector<int>& candidates, int folds,
                            const LifelongParams& base) {
  if (candidates.empty() || folds < 2 || static_cast<int>(tasks.size()) < folds)
    throw ArgumentError("cross-validation needs candidates and at least `folds` tasks");
  int best_h = candidates.front();
  double best_err = std::numeric_limits<double>::infinity();
  for (int h : candidates) {
    LifelongParams p = base;
    p.h = h;
    double err = 0.0;
    for (int f = 0; f < folds; ++f) {
      auto dicts = CoupledDictionaries::zeros(kPolicyDim, kFeatureDim, h);
      for (std::size_t k = 0; k < tasks.size(); ++k)
        if (static_cast<int>(k) % folds != f)
          absorb_environment(dicts, {0, static_cast<int>(k)}, tasks[k].alpha, tasks[k].gamma, tasks[k].phi, true, p);
      for (std::size_t k = 0; k < tasks.size(); ++k) {
        if (static_cast<int>(k) % folds != f) continue;
        const Eigen::VectorXd r = tasks[k].alpha - zero_shot(dicts, tasks[k].phi, p).theta;
        err += r.dot(tasks[k].gamma * r);
      }
    }
    if (err < best_err) {
      best_err = err;
      best_h = h;
    }
  }
  return best_h;
}

// ---- output -----------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

inline void write_devices_csv(const RunMetrics& m, const std::string& label, std::ostream& out, bool header = true) {
  if (header) out << "label,episode,slot,device,aoi,backlog,cpu,cpu_energy,cost\n";
  for (const auto& r : m.series)
    out << label << ',' << r.episode << ',' << r.slot << ',' << r.device << ',' << r.aoi << ',' << detail::fmt(r.backlog) << ','
        << detail::fmt(r.cpu) << ',' << detail::fmt(r.cpu_energy) << ',' << detail::fmt(r.cost) << '\n';
}

inline void write_flights_csv(const RunMetrics& m, const std::string& label, std::ostream& out, bool header = true) {
  if (header)
    out << "label,episode,index,origin,destination,from_x,from_y,to_x,to_y,velocity,distance,energy,depart_slot,"
         "travel_slots,hover_slots,slots_advanced,truncated,change_detected,device_cost,reward\n";
  for (const auto& r : m.flights)
    out << label << ',' << r.episode << ',' << r.index << ',' << r.origin << ',' << r.destination << ',' << detail::fmt(r.from.x) << ','
        << detail::fmt(r.from.y) << ',' << detail::fmt(r.to.x) << ',' << detail::fmt(r.to.y) << ','
        << detail::fmt(r.velocity) << ',' << detail::fmt(r.distance) << ',' << detail::fmt(r.energy) << ','
        << r.depart_slot << ',' << r.travel_slots << ',' << r.hover_slots << ',' << r.slots_advanced << ','
        << (r.truncated ? 1 : 0) << ',' << (r.change_detected ? 1 : 0) << ',' << detail::fmt(r.device_cost) << ','
        << detail::fmt(r.reward) << '\n';
}

inline void write_episodes_csv(const RunMetrics& m, const std::string& label, std::ostream& out, bool header = true) {
  if (header)
    out << "label,episode,mean_reward,mean_cost,mean_aoi,mean_cpu_energy,mean_queue,uav_energy,flights,"
         "detected_envs,true_envs,objective\n";
  for (const auto& e : m.episodes)
    out << label << ',' << e.episode << ',' << detail::fmt(e.mean_reward()) << ',' << detail::fmt(e.mean_cost()) << ','
        << detail::fmt(e.mean_aoi()) << ',' << detail::fmt(e.mean_cpu_energy()) << ',' << detail::fmt(e.mean_queue())
        << ',' << detail::fmt(e.uav_energy) << ',' << e.flights << ',' << e.detected_envs << ',' << e.true_envs << ','
        << detail::fmt(e.objective()) << '\n';
}

}  // namespace uavll
