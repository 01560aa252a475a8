#include <gtest/gtest.h>

#include <cmath>

#include <uavll/uav.hpp>

using namespace uavll;

TEST(power, hover_is_blade_plus_induced) {
  const PropulsionParams p;
  EXPECT_NEAR(power(p, 0.0), 23.661 + 88.627, 1e-9);
  EXPECT_NEAR(power(p, 0.0), 112.288, 1e-9);
}

TEST(power, matches_term_by_term_evaluation) {
  const PropulsionParams p;
  const double v = 20.0;
  const double blade = 23.661 * (1.0 + 3.0 * 400.0 / (120.0 * 120.0));
  const double ratio = 400.0 / (4.03 * 4.03);
  const double induced = 88.627 * std::sqrt(std::sqrt(1.0 + ratio * ratio / 4.0) - ratio / 2.0);
  const double parasite = 0.5 * 0.6 * 1.225 * 0.05 * 0.503 * 8000.0;
  EXPECT_NEAR(power(p, v), blade + induced + parasite, 1e-9);
}

TEST(power, cubic_growth_at_high_speed) {
  const PropulsionParams p;
  EXPECT_NEAR(power(p, 400.0) / power(p, 200.0), 8.0, 0.4);
}

TEST(power, interior_minimum_on_velocity_range) {
  const PropulsionParams p;
  double best_v = 10.0, best = power(p, 10.0);
  for (int k = 0; k <= 300; ++k) {
    const double v = 10.0 + 0.1 * k;
    if (power(p, v) < best) {
      best = power(p, v);
      best_v = v;
    }
  }
  EXPECT_LT(best, power(p, 10.0));
  EXPECT_LT(best, power(p, 40.0));
  EXPECT_GT(best_v, 10.0);
  EXPECT_LT(best_v, 40.0);
}

TEST(power, printed_variant_differs) {
  PropulsionParams p;
  p.printed_induced_variant = true;
  EXPECT_NEAR(power(p, 0.0), 112.288, 1e-9);
  EXPECT_NE(power(p, 15.0), power(PropulsionParams{}, 15.0));
}

TEST(power, negative_velocity_rejected) { EXPECT_THROW(power(PropulsionParams{}, -1.0), BoundsError); }

TEST(flight, zero_distance_costs_nothing) {
  const auto f = flight(PropulsionParams{}, {100, 200}, {100, 200}, 20.0, 1.0);
  EXPECT_EQ(f.energy, 0.0);
  EXPECT_EQ(f.travel_slots, 0);
}

TEST(flight, kilometre_at_twenty) {
  const PropulsionParams p;
  const auto f = flight(p, {0, 0}, {600, 800}, 20.0, 1.0, {}, 3);
  EXPECT_DOUBLE_EQ(f.distance, 1000.0);
  EXPECT_EQ(f.travel_slots, 50);
  EXPECT_NEAR(f.energy, 50.0 * power(p, 20.0), 1e-9);
  EXPECT_EQ(f.destination, 3);
}

TEST(flight, energy_linear_in_distance_and_positive) {
  const PropulsionParams p;
  const auto a = flight(p, {0, 0}, {300, 0}, 17.0, 1.0);
  const auto b = flight(p, {0, 0}, {600, 0}, 17.0, 1.0);
  EXPECT_NEAR(b.energy, 2.0 * a.energy, 1e-9);
  EXPECT_GT(a.energy, 0.0);
}

TEST(flight, slots_round_up) {
  const auto f = flight(PropulsionParams{}, {0, 0}, {101, 0}, 10.0, 1.0);
  EXPECT_EQ(f.travel_slots, 11);
  const auto g = flight(PropulsionParams{}, {0, 0}, {1, 0}, 40.0, 1.0);
  EXPECT_EQ(g.travel_slots, 1);
}

TEST(flight, velocity_bounds_enforced) {
  EXPECT_THROW(flight(PropulsionParams{}, {0, 0}, {1, 0}, 9.99, 1.0), BoundsError);
  EXPECT_THROW(flight(PropulsionParams{}, {0, 0}, {1, 0}, 40.01, 1.0), BoundsError);
}

TEST(flight, best_velocity_independent_of_distance) {
  const PropulsionParams p;
  auto argmin_for = [&](double d) {
    double best_v = 10.0, best = flight(p, {0, 0}, {d, 0}, 10.0, 1.0).energy;
    for (int k = 1; k <= 300; ++k) {
      const double v = 10.0 + 0.1 * k;
      const double e = flight(p, {0, 0}, {d, 0}, v, 1.0).energy;
      if (e < best) {
        best = e;
        best_v = v;
      }
    }
    return best_v;
  };
  EXPECT_DOUBLE_EQ(argmin_for(250.0), argmin_for(900.0));
}

TEST(propulsion_params, json_round_trip_and_validation) {
  PropulsionParams p;
  p.rho = 1.1;
  const auto back = nlohmann::json(p).get<PropulsionParams>();
  EXPECT_EQ(back.rho, 1.1);
  p.area = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
}
