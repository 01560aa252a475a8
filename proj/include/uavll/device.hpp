#pragma once

#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>

#include "uavll/common.hpp"
#include "uavll/envsim.hpp"

namespace uavll {

struct PendingPacket {
  double remaining_cycles = 0.0;
  std::int64_t generation_slot = 0;
};

/// Per-slot device state. `aoi` and `backlog` are the observable pair fed to
/// the policy; the FIFO carries what is needed to evaluate the AoI update.
struct DeviceState {
  std::int64_t aoi = 1;
  double backlog = 0.0;
  std::deque<PendingPacket> pending;
  // Newest generation slot among packets finished by the last step_queue.
  std::optional<std::int64_t> completed_generation;
  double consumed_cycles = 0.0;  // cycles actually used in the last step_queue
};

struct CostParams {
  double beta = 0.03;
  double kappa = 1e-21;
};

inline DeviceState step_queue(DeviceState state, const PacketEvent& packet, double cpu,
                              double eps_max) {
  if (!(cpu >= 0.0) || cpu > eps_max) throw BoundsError("cpu allocation outside [0, eps_max]");
  if (packet.arrived) state.pending.push_back({packet.size, packet.generation_slot});

  state.completed_generation.reset();
  double budget = cpu;
  while (budget > 0.0 && !state.pending.empty()) {
    auto& head = state.pending.front();
    if (head.remaining_cycles <= budget) {
      budget -= head.remaining_cycles;
      state.completed_generation = state.completed_generation
                                       ? std::max(*state.completed_generation, head.generation_slot)
                                       : head.generation_slot;
      state.pending.pop_front();
    } else {
      head.remaining_cycles -= budget;
      budget = 0.0;
    }
  }
  state.consumed_cycles = cpu - budget;
  state.backlog = std::accumulate(state.pending.begin(), state.pending.end(), 0.0,
                                  [](double acc, const PendingPacket& p) { return acc + p.remaining_cycles; });
  return state;
}

/// AoI at the start of slot+1. Uses the completions recorded by step_queue.
inline DeviceState step_aoi(DeviceState state, std::int64_t slot) {
  if (state.completed_generation)
    state.aoi = (slot + 1) - *state.completed_generation;
  else
    state.aoi += 1;
  state.completed_generation.reset();
  return state;
}

inline double cpu_energy(double cpu, double kappa) { return kappa * cpu * cpu * cpu; }

inline double cost(const DeviceState& state, double cpu, const CostParams& params) {
  return params.beta * static_cast<double>(state.aoi) +
         (1.0 - params.beta) * cpu_energy(cpu, params.kappa);
}

inline double reward(const DeviceState& state, double cpu, const CostParams& params) {
  return -cost(state, cpu, params);
}

}  // namespace uavll
