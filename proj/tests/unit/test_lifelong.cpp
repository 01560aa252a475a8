#include <gtest/gtest.h>

#include <cstdio>
#include <vector>

#include <uavll/lifelong.hpp>

#include "oracles.hpp"

using namespace uavll;

namespace {

InteractionHistory synthetic_history(const EnvironmentParams& env, std::int64_t slots, Rng& rng,
                                     std::int64_t first_slot = 0) {
  InteractionHistory h;
  for (std::int64_t t = first_slot; t < first_slot + slots; ++t) {
    const PacketEvent p = sample_packet(env, t, rng);
    HistoryRecord r;
    r.slot = t;
    r.arrived = p.arrived;
    r.arrival_size = p.size;
    h.push(r);
  }
  return h;
}

struct RandomEnv {
  Eigen::VectorXd s, alpha, phi;
  Eigen::MatrixXd gamma;
};

RandomEnv random_env(int h, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  RandomEnv e;
  e.s = Eigen::VectorXd(h);
  for (int j = 0; j < h; ++j) e.s(j) = n(rng);
  e.alpha = Eigen::VectorXd(2);
  e.alpha << n(rng), n(rng);
  e.phi = Eigen::VectorXd(kFeatureDim);
  for (int j = 0; j < kFeatureDim; ++j) e.phi(j) = n(rng);
  Eigen::Matrix2d a;
  a << n(rng), n(rng), n(rng), n(rng);
  e.gamma = a * a.transpose() + 0.1 * Eigen::Matrix2d::Identity();
  return e;
}

}  // namespace

TEST(feature_embed, coordinates_and_bias) {
  FeatureConfig cfg;
  EnvironmentParams p{0.5, cfg.a_ref, 2.5e13, 1e-21, 4e6};
  const Eigen::VectorXd phi = feature_embed(p, cfg);
  ASSERT_EQ(phi.size(), 6);
  EXPECT_DOUBLE_EQ(phi(0), 0.5);
  EXPECT_DOUBLE_EQ(phi(1), 1.0);
  EXPECT_DOUBLE_EQ(phi(2), 2.5e13 / (cfg.a_ref * cfg.a_ref));
  EXPECT_DOUBLE_EQ(phi(3), 1.0);
  EXPECT_DOUBLE_EQ(phi(4), 0.5);
  EXPECT_DOUBLE_EQ(phi(5), 1.0);
}

TEST(feature_embed, lambda_only_changes_first_coordinate) {
  EnvironmentParams a{0.2, 3e7, 2.5e13, 1e-21, 5e6};
  EnvironmentParams b = a;
  b.lambda = 0.7;
  const Eigen::VectorXd d = feature_embed(a) - feature_embed(b);
  EXPECT_NE(d(0), 0.0);
  EXPECT_EQ(d.tail(5).norm(), 0.0);
  EXPECT_EQ(feature_embed(a), feature_embed(a));
}

TEST(discover, every_slot_constant_size) {
  Rng rng(1);
  const auto h = synthetic_history({1.0, 2e7, 0.0, 1e-21, 5e6}, 300, rng);
  const auto d = discover(h, 1e-21, 5e6);
  EXPECT_EQ(d.lambda_hat, 1.0);
  EXPECT_EQ(d.a_bar_hat, 2e7);
  EXPECT_EQ(d.sigma_sq_hat, 0.0);
  EXPECT_FALSE(d.low_confidence);
}

TEST(discover, no_arrivals_is_low_confidence) {
  Rng rng(1);
  const auto h = synthetic_history({0.0, 2e7, 0.0, 1e-21, 5e6}, 100, rng);
  const auto d = discover(h, 1e-21, 5e6);
  EXPECT_EQ(d.lambda_hat, 0.0);
  EXPECT_EQ(d.a_bar_hat, 0.0);
  EXPECT_EQ(d.sigma_sq_hat, 0.0);
  EXPECT_TRUE(d.low_confidence);
  EXPECT_TRUE(d.phi.allFinite());
}

TEST(discover, empty_history_is_argument_error) {
  EXPECT_THROW(discover(InteractionHistory{}, 1e-21, 5e6), ArgumentError);
}

TEST(discover, matches_sample_moments_and_truth_within_standard_errors) {
  const EnvironmentParams env{0.5, 3e7, 2.5e13, 1e-21, 5e6};
  Rng rng(2024);
  const auto h = synthetic_history(env, 2000, rng);
  std::vector<double> sizes;
  for (const auto& r : h.records)
    if (r.arrived) sizes.push_back(r.arrival_size);
  double mean = 0.0;
  for (double s : sizes) mean += s;
  mean /= static_cast<double>(sizes.size());
  double var = 0.0;
  for (double s : sizes) var += (s - mean) * (s - mean);
  var /= static_cast<double>(sizes.size());

  const auto d = discover(h, env.kappa, env.eps_max);
  EXPECT_DOUBLE_EQ(d.lambda_hat, static_cast<double>(sizes.size()) / 2000.0);
  EXPECT_NEAR(d.a_bar_hat, mean, 1e-6 * mean);
  EXPECT_NEAR(d.sigma_sq_hat, var, 1e-6 * var);
  const double n = static_cast<double>(sizes.size());
  EXPECT_NEAR(d.lambda_hat, env.lambda, 4.0 * std::sqrt(0.25 / 2000.0));
  EXPECT_NEAR(d.a_bar_hat, env.a_bar, 4.0 * std::sqrt(env.sigma_sq / n));
  EXPECT_NEAR(d.sigma_sq_hat, env.sigma_sq, 4.0 * env.sigma_sq * std::sqrt(2.0 / n));
}

TEST(detect_change, identical_is_false_and_jump_is_true) {
  Rng rng(3);
  const auto h = synthetic_history({0.2, 3e7, 2.5e13, 1e-21, 5e6}, 500, rng);
  const auto a = discover(h, 1e-21, 5e6);
  EXPECT_FALSE(detect_change(a, a, 0.1));
  EnvironmentDescriptor lo, hi;
  lo.phi = feature_embed({0.2, 3e7, 2.5e13, 1e-21, 5e6});
  hi.phi = feature_embed({0.8, 3e7, 2.5e13, 1e-21, 5e6});
  EXPECT_NEAR(feature_distance(lo, hi), 0.6, 1e-12);
  EXPECT_TRUE(detect_change(lo, hi, 0.1));
}

TEST(detect_change, bias_coordinate_is_ignored) {
  EnvironmentDescriptor a, b;
  a.phi = feature_embed({0.2, 3e7, 2.5e13, 1e-21, 5e6});
  b.phi = a.phi;
  b.phi(5) = 100.0;
  EXPECT_FALSE(detect_change(a, b, 1e-9));
}

TEST(estimate_change_age, finds_recent_change) {
  Rng rng(5);
  auto h = synthetic_history({0.05, 1e7, 2.5e13, 1e-21, 5e6}, 1000, rng);
  const auto tail = synthetic_history({0.6, 4.5e7, 2.5e13, 1e-21, 5e6}, 400, rng, 1000);
  for (const auto& r : tail.records) h.push(r);
  const auto age = estimate_change_age(h, 200, 0.15, 1e-21, 5e6);
  EXPECT_EQ(age, 400);
  auto steady = synthetic_history({0.6, 4.5e7, 2.5e13, 1e-21, 5e6}, 1000, rng);
  EXPECT_EQ(estimate_change_age(steady, 200, 0.15, 1e-21, 5e6), 1000);
}

TEST(update_dictionary, single_environment_reproduces_alpha) {
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  LifelongParams p;
  p.eta3 = 1e-10;
  Eigen::VectorXd s(4);
  s << 0.7, 0.0, -0.4, 0.2;
  Eigen::Vector2d alpha(0.9, -0.3);
  Eigen::VectorXd phi = feature_embed({0.1, 2e7, 2.5e13, 1e-21, 5e6});
  EXPECT_TRUE(update_dictionary(dicts, {0, 0}, s, alpha, Eigen::Matrix2d::Identity(), phi, true, p));
  EXPECT_EQ(dicts.env_count, 1);
  EXPECT_LT((dicts.L * s - alpha).norm(), 1e-8);
  EXPECT_LT((dicts.D * s - phi).norm(), 1e-8);
}

TEST(update_dictionary, revisit_with_same_contribution_is_identity) {
  Rng rng(8);
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  LifelongParams p;
  std::vector<RandomEnv> envs;
  for (int k = 0; k < 3; ++k) {
    envs.push_back(random_env(4, rng));
    update_dictionary(dicts, {k, 0}, envs[k].s, envs[k].alpha, envs[k].gamma, envs[k].phi, true, p);
  }
  const Eigen::MatrixXd l = dicts.L, d = dicts.D;
  EXPECT_FALSE(update_dictionary(dicts, {1, 0}, envs[1].s, envs[1].alpha, envs[1].gamma, envs[1].phi, false, p));
  EXPECT_EQ(dicts.env_count, 3);
  EXPECT_LT((dicts.L - l).norm(), 1e-10 * l.norm());
  EXPECT_LT((dicts.D - d).norm(), 1e-10 * d.norm());
}

TEST(update_dictionary, incremental_matches_batch_and_log) {
  Rng rng(11);
  const int h = 4;
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, h);
  LifelongParams p;
  std::vector<oracle::Environment> pol, feat;
  for (int k = 0; k < 10; ++k) {
    const auto e = random_env(h, rng);
    update_dictionary(dicts, {k % 3, k}, e.s, e.alpha, e.gamma, e.phi, true, p);
    pol.push_back({e.s, e.alpha, e.gamma});
    feat.push_back({e.s, e.phi, p.eta1 * Eigen::MatrixXd::Identity(kFeatureDim, kFeatureDim)});
  }
  const Eigen::MatrixXd l_batch = oracle::batch_basis(pol, 2, h, p.eta3);
  const Eigen::MatrixXd d_batch = oracle::batch_basis(feat, kFeatureDim, h, p.eta3);
  EXPECT_LT((dicts.L - l_batch).norm() / l_batch.norm(), 1e-6);
  EXPECT_LT((dicts.D - d_batch).norm() / d_batch.norm(), 1e-6);

  // Accumulators equal the sum of the logged contributions.
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * h, 2 * h);
  for (const auto& [key, c] : dicts.absorbed)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < h; ++j) a.block(2 * i, 2 * j, 2, 2) += c.s(i) * c.s(j) * c.gamma;
  EXPECT_LT((a - dicts.A_L).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(update_dictionary, does_not_increase_batch_objective) {
  Rng rng(12);
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  LifelongParams p;
  for (int k = 0; k < 6; ++k) {
    const auto e = random_env(4, rng);
    auto probe = dicts;
    probe.absorbed[{k, 0}] = Contribution{e.s, e.alpha, e.gamma, e.phi};
    probe.env_count += 1;
    const double before = policy_basis_objective(probe, p.eta3);
    update_dictionary(dicts, {k, 0}, e.s, e.alpha, e.gamma, e.phi, true, p);
    EXPECT_LE(policy_basis_objective(dicts, p.eta3), before + 1e-12);
  }
}

TEST(update_dictionary, singular_system_without_ridge) {
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  LifelongParams p;
  p.eta3 = 0.0;
  Eigen::VectorXd s = Eigen::VectorXd::Unit(4, 0);
  EXPECT_THROW(update_dictionary(dicts, {0, 0}, s, Eigen::Vector2d(1, 1), Eigen::Matrix2d::Identity(),
                                 Eigen::VectorXd::Ones(kFeatureDim), true, p),
               NumericError);
}

TEST(update_dictionary, dimension_mismatch) {
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  EXPECT_THROW(update_dictionary(dicts, {0, 0}, Eigen::VectorXd::Ones(3), Eigen::Vector2d(1, 1),
                                 Eigen::Matrix2d::Identity(), Eigen::VectorXd::Ones(kFeatureDim), true, LifelongParams{}),
               ArgumentError);
}

TEST(reinit_zero_columns, fresh_dictionaries_take_latest_direction) {
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  const Eigen::Vector2d alpha(3.0, 4.0);
  const Eigen::VectorXd phi = Eigen::VectorXd::Constant(kFeatureDim, 2.0);
  reinit_zero_columns(dicts, alpha, phi);
  EXPECT_LT((dicts.L.col(0) - alpha / 5.0).norm(), 1e-15);
  EXPECT_NEAR(dicts.D.col(0).norm(), 1.0, 1e-15);
}

TEST(reinit_zero_columns, only_zero_columns_change) {
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 3);
  dicts.L.col(0) << 1.0, 2.0;
  dicts.L.col(2) << -1.0, 0.5;
  dicts.D.col(0).setConstant(0.3);
  dicts.D.col(2).setConstant(-0.2);
  const auto before = dicts;
  reinit_zero_columns(dicts, Eigen::Vector2d(0.0, 2.0), Eigen::VectorXd::Ones(kFeatureDim));
  EXPECT_EQ(dicts.L.col(0), before.L.col(0));
  EXPECT_EQ(dicts.L.col(2), before.L.col(2));
  EXPECT_EQ(dicts.D.col(0), before.D.col(0));
  EXPECT_EQ(dicts.L.col(1), Eigen::Vector2d(0.0, 1.0));

  auto full = before;
  full.L.col(1) << 0.1, 0.1;
  const auto copy = full;
  reinit_zero_columns(full, Eigen::Vector2d(5.0, 5.0), Eigen::VectorXd::Ones(kFeatureDim));
  EXPECT_EQ(full.L, copy.L);
  EXPECT_EQ(full.D, copy.D);
}

TEST(zero_shot, untrained_is_state_error) {
  const auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  EXPECT_THROW(zero_shot(dicts, Eigen::VectorXd::Ones(kFeatureDim), LifelongParams{}), StateError);
}

TEST(zero_shot, zero_feature_basis_gives_zero_policy) {
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  dicts.env_count = 1;
  dicts.L.setOnes();
  const auto pol = zero_shot(dicts, Eigen::VectorXd::Ones(kFeatureDim), LifelongParams{});
  EXPECT_EQ(pol.theta.norm(), 0.0);
}

TEST(zero_shot, replays_trained_environment) {
  // Environments generated by ground-truth bases, absorbed with their true codes.
  Rng rng(21);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd l_true(2, 4), d_true(kFeatureDim, 4);
  for (Eigen::Index i = 0; i < l_true.size(); ++i) l_true.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < d_true.size(); ++i) d_true.data()[i] = n(rng);
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  LifelongParams p;
  p.eta2 = 1e-6;
  p.eta3 = 1e-8;
  std::vector<Eigen::VectorXd> codes;
  for (int k = 0; k < 12; ++k) {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(4);
    s(k % 4) = 1.0 + 0.5 * n(rng);
    s((k + 1) % 4) = 0.5 * n(rng);
    codes.push_back(s);
    update_dictionary(dicts, {k, 0}, s, l_true * s, Eigen::Matrix2d::Identity(), d_true * s, true, p);
  }
  for (int k = 0; k < 12; ++k) {
    const Eigen::Vector2d expected = dicts.L * codes[static_cast<std::size_t>(k)];
    const auto pol = zero_shot(dicts, d_true * codes[static_cast<std::size_t>(k)], p);
    EXPECT_LT((pol.theta - expected).norm(), 0.1 * expected.norm()) << "environment " << k;
  }
  const Eigen::VectorXd phi = d_true * codes[0];
  const SparseCode direct = fit_sparse_code(dicts.D, phi, Eigen::MatrixXd::Identity(kFeatureDim, kFeatureDim), p.eta2);
  EXPECT_LT((zero_shot(dicts, phi, p).theta - dicts.L * direct.s).norm(), 1e-12);
}

TEST(checkpoint, round_trip) {
  Rng rng(4);
  auto dicts = CoupledDictionaries::zeros(2, kFeatureDim, 4);
  LifelongParams p;
  for (int k = 0; k < 4; ++k) {
    const auto e = random_env(4, rng);
    absorb_environment(dicts, {k, 1}, e.alpha, e.gamma, e.phi, true, p);
  }
  const std::string path = ::testing::TempDir() + "/dicts.json";
  save_checkpoint(dicts, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.env_count, dicts.env_count);
  EXPECT_EQ(back.L, dicts.L);
  EXPECT_EQ(back.D, dicts.D);
  EXPECT_EQ(back.A_L, dicts.A_L);
  EXPECT_EQ(back.b_D, dicts.b_D);
  ASSERT_EQ(back.absorbed.size(), dicts.absorbed.size());
  EXPECT_EQ(back.absorbed.at({2, 1}).gamma, dicts.absorbed.at({2, 1}).gamma);
  std::remove(path.c_str());
  EXPECT_THROW(load_checkpoint(path), ConfigError);
}

TEST(checkpoint, rejects_wrong_format) {
  auto j = dictionaries_to_json(CoupledDictionaries::zeros(2, kFeatureDim, 4));
  j["version"] = 99;
  EXPECT_THROW(dictionaries_from_json(j), ConfigError);
  j["version"] = kCheckpointVersion;
  j["L"]["rows"] = 3;
  EXPECT_THROW(dictionaries_from_json(j), ConfigError);
}
