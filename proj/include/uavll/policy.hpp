#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "uavll/common.hpp"
#include "uavll/device.hpp"
#include "uavll/envsim.hpp"

namespace uavll {

/// Reference magnitudes used to normalize the (AoI, backlog) state before it
/// meets the linear policy. Actions are expressed as fractions of eps_max.
struct FeatureScale {
  double aoi_ref = 50.0;
  double backlog_ref = 5e7;
};

inline Eigen::Vector2d state_features(std::int64_t aoi, double backlog, const FeatureScale& scale) {
  return {static_cast<double>(aoi) / scale.aoi_ref, backlog / scale.backlog_ref};
}

inline Eigen::Vector2d state_features(const DeviceState& s, const FeatureScale& scale) {
  return state_features(s.aoi, s.backlog, scale);
}

/// Gaussian linear controller: u = theta . x + N(0, sigma_z^2), cpu = clamp(u, 0, 1) * eps_max.
struct LinearPolicy {
  Eigen::Vector2d theta = Eigen::Vector2d::Zero();
  double sigma_z = 0.2;
  FeatureScale scale;

  double mean_action(const Eigen::Vector2d& x) const { return theta.dot(x); }
};

struct ActionSample {
  double cpu = 0.0;  // cycles actually allocated, within [0, eps_max]
  double raw = 0.0;  // unclamped normalized draw, needed for the score function
};

inline ActionSample act(const LinearPolicy& policy, const DeviceState& state, double eps_max, Rng& rng) {
  const Eigen::Vector2d x = state_features(state, policy.scale);
  double u = policy.mean_action(x);
  if (policy.sigma_z > 0.0) u += policy.sigma_z * std::normal_distribution<double>(0.0, 1.0)(rng);
  return {std::clamp(u, 0.0, 1.0) * eps_max, u};
}

struct HistoryRecord {
  std::int64_t slot = 0;
  std::int64_t aoi = 0;
  double backlog = 0.0;
  double action = 0.0;
  double raw_action = 0.0;
  double reward = 0.0;
  bool arrived = false;
  double arrival_size = 0.0;
  double backlog_next = 0.0;
};

struct InteractionHistory {
  std::vector<HistoryRecord> records;
  std::int64_t start_slot = 0;
  std::int64_t end_slot = 0;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  void push(const HistoryRecord& r) {
    if (records.empty()) start_slot = r.slot;
    records.push_back(r);
    end_slot = r.slot + 1;
  }

  /// The most recent `window` records (all of them if fewer).
  InteractionHistory tail(std::size_t window) const {
    InteractionHistory out;
    const std::size_t n = std::min(window, records.size());
    for (std::size_t i = records.size() - n; i < records.size(); ++i) out.push(records[i]);
    return out;
  }

  double mean_reward() const {
    if (records.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& r : records) acc += r.reward;
    return acc / static_cast<double>(records.size());
  }
};

/// Advances one device by one slot under `policy` and returns the record.
inline HistoryRecord device_slot(DeviceState& state, const EnvironmentParams& env,
                                 const LinearPolicy& policy, std::int64_t slot, double beta, Rng& rng) {
  HistoryRecord rec;
  rec.slot = slot;
  rec.aoi = state.aoi;
  rec.backlog = state.backlog;
  const ActionSample a = act(policy, state, env.eps_max, rng);
  rec.action = a.cpu;
  rec.raw_action = a.raw;
  rec.reward = reward(state, a.cpu, CostParams{beta, env.kappa});
  const PacketEvent pkt = sample_packet(env, slot, rng);
  rec.arrived = pkt.arrived;
  rec.arrival_size = pkt.size;
  state = step_aoi(step_queue(std::move(state), pkt, a.cpu, env.eps_max), slot);
  rec.backlog_next = state.backlog;
  return rec;
}

/// Episodic simulator of one stationary environment, started from a fresh device.
struct EpisodeSimulator {
  EnvironmentParams env;
  double beta = 0.03;
  std::int64_t episode_slots = 200;

  InteractionHistory run(const LinearPolicy& policy, Rng& rng) const {
    DeviceState state;
    InteractionHistory h;
    h.records.reserve(static_cast<std::size_t>(episode_slots));
    for (std::int64_t t = 0; t < episode_slots; ++t) h.push(device_slot(state, env, policy, t, beta, rng));
    return h;
  }
};

inline double evaluate_policy(const EpisodeSimulator& sim, const LinearPolicy& policy, int episodes, Rng& rng) {
  double acc = 0.0;
  for (int e = 0; e < episodes; ++e) acc += sim.run(policy, rng).mean_reward();
  return acc / std::max(episodes, 1);
}

/// Likelihood-ratio estimate of grad J with the batch-mean reward as baseline.
inline Eigen::Vector2d reinforce_gradient(const LinearPolicy& policy,
                                          std::span<const InteractionHistory> histories) {
  if (histories.empty()) throw ArgumentError("policy gradient needs at least one history");
  if (!(policy.sigma_z > 0.0)) throw ArgumentError("policy gradient needs sigma_z > 0");
  double baseline = 0.0;
  for (const auto& h : histories) baseline += h.mean_reward();
  baseline /= static_cast<double>(histories.size());

  const double inv_var = 1.0 / (policy.sigma_z * policy.sigma_z);
  Eigen::Vector2d grad = Eigen::Vector2d::Zero();
  for (const auto& h : histories) {
    Eigen::Vector2d score = Eigen::Vector2d::Zero();
    for (const auto& r : h.records) {
      const Eigen::Vector2d x = state_features(r.aoi, r.backlog, policy.scale);
      score += (r.raw_action - policy.mean_action(x)) * inv_var * x;
    }
    grad += score * (h.mean_reward() - baseline);
  }
  return grad / static_cast<double>(histories.size());
}

/// Population standard deviation of the per-episode mean rewards.
inline double reward_spread(std::span<const InteractionHistory> histories) {
  if (histories.empty()) return 0.0;
  double mean = 0.0;
  for (const auto& h : histories) mean += h.mean_reward();
  mean /= static_cast<double>(histories.size());
  double var = 0.0;
  for (const auto& h : histories) var += (h.mean_reward() - mean) * (h.mean_reward() - mean);
  return std::sqrt(var / static_cast<double>(histories.size()));
}

/// One ascent step. The advantage is measured in units of the batch reward
/// spread, so `learn_rate` does not depend on the reward scale of the
/// environment; the direction is that of reinforce_gradient.
inline LinearPolicy policy_gradient_step(const LinearPolicy& policy,
                                         std::span<const InteractionHistory> histories, double learn_rate) {
  const Eigen::Vector2d grad = reinforce_gradient(policy, histories);
  LinearPolicy next = policy;
  const double spread = reward_spread(histories);
  if (spread > 0.0) next.theta += learn_rate * grad / spread;
  return next;
}

/// Fisher-style curvature proxy of the Gaussian policy: mean x x^T / sigma_z^2.
inline Eigen::Matrix2d estimate_hessian(const LinearPolicy& at,
                                        std::span<const InteractionHistory> histories) {
  Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
  std::size_t n = 0;
  for (const auto& h : histories) {
    for (const auto& r : h.records) {
      const Eigen::Vector2d x = state_features(r.aoi, r.backlog, at.scale);
      acc += x * x.transpose();
      ++n;
    }
  }
  if (n == 0) return acc;
  acc /= static_cast<double>(n) * at.sigma_z * at.sigma_z;
  return 0.5 * (acc + acc.transpose());
}

struct BaseLearnerOptions {
  int budget_episodes = 600;
  int episodes_per_step = 20;
  double learn_rate = 0.02;
  double step_tolerance = 1e-9;  // stop once an update moves theta less than this
};

struct BaseLearnerResult {
  Eigen::Vector2d alpha = Eigen::Vector2d::Zero();
  Eigen::Matrix2d hessian = Eigen::Matrix2d::Zero();
  double mean_reward = 0.0;
  std::vector<double> curve;  // batch mean reward per iteration
  int episodes_used = 0;
};

inline BaseLearnerResult base_learn(const EpisodeSimulator& sim, const LinearPolicy& initial,
                                    const BaseLearnerOptions& opt, Rng& rng) {
  if (opt.budget_episodes < 1 || opt.episodes_per_step < 1)
    throw ArgumentError("base learner budget must be positive");
  BaseLearnerResult out;
  LinearPolicy current = initial;
  LinearPolicy best = initial;
  std::vector<InteractionHistory> batch(static_cast<std::size_t>(opt.episodes_per_step));
  std::vector<InteractionHistory> best_batch;
  double best_reward = -std::numeric_limits<double>::infinity();

  const int iterations = (opt.budget_episodes + opt.episodes_per_step - 1) / opt.episodes_per_step;
  for (int it = 0; it < iterations; ++it) {
    double batch_reward = 0.0;
    for (auto& h : batch) {
      h = sim.run(current, rng);
      batch_reward += h.mean_reward();
    }
    batch_reward /= static_cast<double>(batch.size());
    out.curve.push_back(batch_reward);
    out.episodes_used += opt.episodes_per_step;
    if (batch_reward > best_reward) {
      best_reward = batch_reward;
      best = current;
      best_batch = batch;
    }
    const LinearPolicy next = policy_gradient_step(current, batch, opt.learn_rate);
    const double moved = (next.theta - current.theta).norm();
    current = next;
    if (moved < opt.step_tolerance) break;
  }
  out.alpha = best.theta;
  out.mean_reward = best_reward;
  out.hessian = estimate_hessian(best, best_batch);
  return out;
}

inline void to_json(nlohmann::json& j, const BaseLearnerResult& r) {
  j = {{"alpha", {r.alpha(0), r.alpha(1)}},
       {"hessian", {{r.hessian(0, 0), r.hessian(0, 1)}, {r.hessian(1, 0), r.hessian(1, 1)}}},
       {"mean_reward", r.mean_reward},
       {"episodes_used", r.episodes_used},
       {"curve", r.curve}};
}

}  // namespace uavll
