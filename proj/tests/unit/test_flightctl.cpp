#include <gtest/gtest.h>

#include <memory>
#include <vector>

#include <uavll/flightctl.hpp>

#include "oracles.hpp"

using namespace uavll;

namespace {

UavState state_for(int n, int current = -1) {
  UavState s;
  s.current = current;
  s.location = {250.0 + 10.0 * n, 600.0};
  for (int i = 0; i < n; ++i) {
    s.elapsed.push_back(40.0 * (i + 1));
    s.since_visit.push_back(15.0 * (n - i));
  }
  return s;
}

FlightTransition sample_transition(int n) {
  FlightTransition t;
  t.state = state_for(n, 1);
  t.action.destination = 2;
  t.action.raw_velocity = 0.4;
  t.action.velocity = 25.0;
  t.reward = -1.3;
  t.next = state_for(n, 2);
  t.next.location = {900.0, 120.0};
  t.next.elapsed[0] = 400.0;
  return t;
}

void randomize(Mlp& net, Rng& rng, double scale) {
  Eigen::VectorXd p = net.parameters();
  std::normal_distribution<double> n(0.0, scale);
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) += n(rng);
  net.set_parameters(p);
}

}  // namespace

TEST(actor_critic, untrained_destination_distribution_is_uniform) {
  Rng rng(1);
  ActorCritic ac(5, ActorCriticConfig{}, rng);
  const auto h = ac.heads(state_for(5));
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(h.probs(i), 0.2, 1e-12);
  EXPECT_NEAR(h.probs.sum(), 1.0, 1e-6);
}

TEST(actor_critic, current_device_is_masked) {
  Rng rng(1);
  ActorCritic ac(4, ActorCriticConfig{}, rng);
  const auto h = ac.heads(state_for(4, 2));
  EXPECT_EQ(h.probs(2), 0.0);
  EXPECT_NEAR(h.probs.sum(), 1.0, 1e-12);
  for (int k = 0; k < 200; ++k) EXPECT_NE(ac.select(state_for(4, 2), rng).destination, 2);
}

TEST(actor_critic, softmax_shift_invariance) {
  Rng rng(2);
  ActorCritic ac(4, ActorCriticConfig{}, rng);
  randomize(ac.network(), rng, 0.3);
  const auto before = ac.heads(state_for(4));
  Eigen::VectorXd p = ac.network().parameters();
  p.tail(6).head(4).array() += 3.7;  // output biases of the destination logits
  ac.network().set_parameters(p);
  const auto after = ac.heads(state_for(4));
  EXPECT_LT((before.probs - after.probs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(actor_critic, reproducible_actions) {
  Rng init_a(3), init_b(3);
  ActorCritic a(6, ActorCriticConfig{}, init_a), b(6, ActorCriticConfig{}, init_b);
  Rng ra(9), rb(9);
  for (int k = 0; k < 50; ++k) {
    const auto x = a.select(state_for(6, k % 6), ra);
    const auto y = b.select(state_for(6, k % 6), rb);
    EXPECT_EQ(x.destination, y.destination);
    EXPECT_EQ(x.velocity, y.velocity);
  }
}

TEST(actor_critic, velocity_always_in_bounds) {
  Rng rng(4);
  ActorCriticConfig cfg;
  cfg.velocity_noise = 5.0;
  ActorCritic ac(3, cfg, rng);
  randomize(ac.network(), rng, 2.0);
  for (int k = 0; k < 2000; ++k) {
    const auto a = ac.select(state_for(3, k % 3), rng);
    ASSERT_GE(a.velocity, cfg.bounds.v_min);
    ASSERT_LE(a.velocity, cfg.bounds.v_max);
  }
  cfg.hard_clamp_velocity = true;
  ActorCritic clamped(3, cfg, rng);
  randomize(clamped.network(), rng, 2.0);
  for (int k = 0; k < 2000; ++k) {
    const auto a = clamped.select(state_for(3), rng);
    ASSERT_GE(a.velocity, cfg.bounds.v_min);
    ASSERT_LE(a.velocity, cfg.bounds.v_max);
  }
}

TEST(actor_critic, zero_learn_rate_keeps_weights) {
  Rng rng(5);
  ActorCriticConfig cfg;
  cfg.learn_rate = 0.0;
  ActorCritic ac(3, cfg, rng);
  randomize(ac.network(), rng, 0.2);
  const Eigen::VectorXd before = ac.network().parameters();
  ac.update(sample_transition(3));
  EXPECT_EQ(ac.network().parameters(), before);
}

TEST(actor_critic, non_finite_reward_is_numeric_error) {
  Rng rng(5);
  ActorCritic ac(3, ActorCriticConfig{}, rng);
  auto t = sample_transition(3);
  t.reward = std::nan("");
  EXPECT_THROW(ac.update(t), NumericError);
}

TEST(actor_critic, backprop_matches_finite_differences) {
  Rng rng(6);
  ActorCriticConfig cfg;
  cfg.entropy_coef = 0.01;
  ActorCritic ac(3, cfg, rng);
  randomize(ac.network(), rng, 0.2);
  const auto t = sample_transition(3);
  double target = 0.0, adv = 0.0;
  const Eigen::VectorXd analytic = ac.gradient(t, &target, &adv);
  Mlp probe = ac.network();
  const Eigen::VectorXd numeric = oracle::central_difference(
      [&](const Eigen::VectorXd& w) {
        probe.set_parameters(w);
        return ac.surrogate_loss(probe, t, target, adv);
      },
      ac.network().parameters(), 1e-5);
  EXPECT_LT(oracle::max_relative_error(analytic, numeric), 1e-4);
}

TEST(actor_critic, critic_converges_to_discounted_sum_on_single_state) {
  Rng rng(7);
  ActorCriticConfig cfg;
  cfg.learn_rate = 0.05;
  cfg.discount = 0.9;
  ActorCritic ac(2, cfg, rng);
  FlightTransition t;
  t.state = state_for(2);
  t.next = t.state;
  t.action.destination = 0;
  t.reward = 1.0;
  for (int k = 0; k < 20000; ++k) {
    t.action.raw_velocity = ac.heads(t.state).velocity_mean;
    ac.update(t);
  }
  EXPECT_NEAR(ac.heads(t.state).value, 10.0, 0.1);
}

TEST(actor_critic, learns_to_favor_fast_changing_device) {
  // Staleness toy: device i accrues cost at rate r_i per step until visited.
  Rng rng(8);
  ActorCriticConfig cfg;
  cfg.mask_current = false;
  cfg.learn_rate = 0.01;
  cfg.encoding.elapsed_ref = 10.0;
  ActorCritic ac(2, cfg, rng);
  const double rate[2] = {10.0, 1.0};
  UavState s;
  s.elapsed = {0.0, 0.0};
  s.since_visit = {0.0, 0.0};
  s.location = {0.0, 0.0};
  int visits0 = 0, counted = 0;
  for (int step = 0; step < 30000; ++step) {
    const auto a = ac.select(s, rng);
    UavState next = s;
    for (int i = 0; i < 2; ++i) next.elapsed[i] += 1.0;
    next.elapsed[static_cast<std::size_t>(a.destination)] = 0.0;
    next.current = a.destination;
    next.location = {a.destination * 500.0, 0.0};
    const double reward = -(rate[0] * next.elapsed[0] + rate[1] * next.elapsed[1]) / 10.0;
    ac.update({s, a, reward, next});
    s = next;
    if (step >= 25000) {
      visits0 += a.destination == 0;
      ++counted;
    }
  }
  EXPECT_GT(static_cast<double>(visits0) / counted, 0.5);
}

TEST(random_controller, uniform_over_devices_at_twenty) {
  RandomController c;
  Rng rng(10);
  std::vector<int> hits(6, 0);
  const int draws = 60000;
  for (int k = 0; k < draws; ++k) {
    const auto a = c.select(state_for(6, k % 6), rng);
    ASSERT_EQ(a.velocity, 20.0);
    ++hits[static_cast<std::size_t>(a.destination)];
  }
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / draws, 1.0 / 6.0, 0.02 / 6.0);
}

TEST(random_controller, single_device) {
  RandomController c;
  Rng rng(1);
  for (int k = 0; k < 100; ++k) EXPECT_EQ(c.select(state_for(1), rng).destination, 0);
}

TEST(force_controller, tie_breaks_to_lowest_index) {
  ForceController c({100.0, 100.0, 100.0});
  UavState s = state_for(3);
  s.since_visit = {50.0, 50.0, 50.0};
  Rng rng(1);
  const auto a = c.select(s, rng);
  EXPECT_EQ(a.destination, 0);
  EXPECT_EQ(a.velocity, 20.0);
}

TEST(force_controller, prefers_fast_changing_device) {
  ForceController c({400.0, 40.0});
  UavState s = state_for(2);
  s.since_visit = {100.0, 100.0};
  Rng rng(1);
  EXPECT_EQ(c.select(s, rng).destination, 1);
}

TEST(force_controller, just_visited_device_not_rechosen) {
  ForceController c({100.0, 300.0});
  UavState s = state_for(2);
  s.since_visit = {90.0, 60.0};
  Rng rng(1);
  const int first = c.select(s, rng).destination;
  EXPECT_EQ(first, 0);
  // Flight of 10 slots plus a hover slot, then the visited device resets.
  for (auto& v : s.since_visit) v += 11.0;
  s.since_visit[static_cast<std::size_t>(first)] = 0.0;
  EXPECT_NE(c.select(s, rng).destination, first);
}

TEST(qnet, full_exploration_is_uniform_over_actions) {
  Rng rng(11);
  QNetConfig cfg;
  cfg.epsilon_start = cfg.epsilon_end = 1.0;
  QNetController q(3, cfg, rng);
  std::vector<int> hits(static_cast<std::size_t>(q.action_count()), 0);
  const int draws = 48000;
  for (int k = 0; k < draws; ++k) ++hits[static_cast<std::size_t>(q.select(state_for(3), rng).action_index)];
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / draws, 1.0 / 12.0, 0.01);
}

TEST(qnet, zero_learn_rate_keeps_weights) {
  Rng rng(12);
  QNetConfig cfg;
  cfg.learn_rate = 0.0;
  QNetController q(3, cfg, rng);
  auto t = sample_transition(3);
  t.action = q.decode(5);
  const Eigen::VectorXd before = q.network().parameters();
  q.update(t);
  EXPECT_EQ(q.network().parameters(), before);
}

TEST(qnet, backprop_matches_finite_differences) {
  Rng rng(13);
  QNetController q(3, QNetConfig{}, rng);
  auto t = sample_transition(3);
  t.action = q.decode(7);
  double target = 0.0;
  const Eigen::VectorXd analytic = q.gradient(t, &target);
  Mlp probe = q.network();
  const Eigen::VectorXd numeric = oracle::central_difference(
      [&](const Eigen::VectorXd& w) {
        probe.set_parameters(w);
        return q.loss(probe, t, target);
      },
      q.network().parameters(), 1e-5);
  EXPECT_LT(oracle::max_relative_error(analytic, numeric), 1e-4);
}

TEST(qnet, greedy_respects_mask_and_velocity_grid) {
  Rng rng(14);
  QNetController q(4, QNetConfig{}, rng);
  q.set_training(false);
  for (int k = 0; k < 100; ++k) {
    const auto a = q.select(state_for(4, k % 4), rng);
    EXPECT_NE(a.destination, k % 4);
    EXPECT_TRUE(a.velocity == 10.0 || a.velocity == 20.0 || a.velocity == 30.0 || a.velocity == 40.0);
  }
}

TEST(controllers, share_one_interface_and_respect_bounds) {
  Rng rng(15);
  std::vector<std::unique_ptr<FlightController>> all;
  all.push_back(std::make_unique<RandomController>());
  all.push_back(std::make_unique<ForceController>(std::vector<double>{100, 200, 300, 400}));
  all.push_back(std::make_unique<ActorCritic>(4, ActorCriticConfig{}, rng));
  all.push_back(std::make_unique<QNetController>(4, QNetConfig{}, rng));
  const VelocityBounds bounds;
  for (auto& c : all) {
    for (int k = 0; k < 200; ++k) {
      const auto a = c->select(state_for(4, k % 4), rng);
      EXPECT_GE(a.destination, 0);
      EXPECT_LT(a.destination, 4);
      EXPECT_GE(a.velocity, bounds.v_min);
      EXPECT_LE(a.velocity, bounds.v_max);
    }
  }
}
