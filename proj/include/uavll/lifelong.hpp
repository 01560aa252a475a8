#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "uavll/common.hpp"
#include "uavll/envsim.hpp"
#include "uavll/lasso.hpp"
#include "uavll/policy.hpp"

namespace uavll {

/// Normalization constants of the environment embedding.
struct FeatureConfig {
  double a_ref = 2e7;
  double kappa_ref = 1e-21;
  double eps_ref = 8e6;
};

inline constexpr int kFeatureDim = 6;
inline constexpr int kPolicyDim = 2;

/// (lambda, a/a_ref, sigma^2/a_ref^2, kappa/kappa_ref, eps_max/eps_ref, 1)
inline Eigen::VectorXd feature_embed(const EnvironmentParams& p, const FeatureConfig& cfg = {}) {
  Eigen::VectorXd phi(kFeatureDim);
  phi << p.lambda, p.a_bar / cfg.a_ref, p.sigma_sq / (cfg.a_ref * cfg.a_ref), p.kappa / cfg.kappa_ref,
      p.eps_max / cfg.eps_ref, 1.0;
  return phi;
}

struct EnvironmentDescriptor {
  double lambda_hat = 0.0;
  double a_bar_hat = 0.0;
  double sigma_sq_hat = 0.0;
  double kappa = 0.0;
  double eps_max = 0.0;
  std::size_t arrivals = 0;
  bool low_confidence = false;
  Eigen::VectorXd phi;

  EnvironmentParams params() const { return {lambda_hat, a_bar_hat, sigma_sq_hat, kappa, eps_max}; }
};

inline EnvironmentDescriptor discover(const InteractionHistory& history, double kappa, double eps_max,
                                      const FeatureConfig& cfg = {}) {
  if (history.empty()) throw ArgumentError("environment discovery needs a non-empty history");
  EnvironmentDescriptor d;
  d.kappa = kappa;
  d.eps_max = eps_max;
  double sum = 0.0;
  for (const auto& r : history.records) {
    if (!r.arrived) continue;
    ++d.arrivals;
    sum += r.arrival_size;
  }
  d.lambda_hat = static_cast<double>(d.arrivals) / static_cast<double>(history.size());
  if (d.arrivals == 0) {
    d.low_confidence = true;
  } else {
    d.a_bar_hat = sum / static_cast<double>(d.arrivals);
    double sq = 0.0;
    for (const auto& r : history.records)
      if (r.arrived) sq += (r.arrival_size - d.a_bar_hat) * (r.arrival_size - d.a_bar_hat);
    d.sigma_sq_hat = sq / static_cast<double>(d.arrivals);
  }
  d.phi = feature_embed(d.params(), cfg);
  return d;
}

/// Euclidean distance between embeddings, bias coordinate excluded.
inline double feature_distance(const EnvironmentDescriptor& a, const EnvironmentDescriptor& b) {
  return (a.phi.head(kFeatureDim - 1) - b.phi.head(kFeatureDim - 1)).norm();
}

inline bool detect_change(const EnvironmentDescriptor& prev, const EnvironmentDescriptor& cur, double threshold) {
  return feature_distance(prev, cur) > threshold;
}

/// Slots since the most recent change visible inside `history`, found by
/// comparing consecutive windows (newest first) against the newest window.
/// Returns the full history length when no change is visible.
inline std::int64_t estimate_change_age(const InteractionHistory& history, std::size_t window, double threshold,
                                        double kappa, double eps_max, const FeatureConfig& cfg = {}) {
  const std::size_t n = history.size();
  if (n == 0 || window == 0) return 0;
  if (n <= window) return static_cast<std::int64_t>(n);
  auto slice = [&](std::size_t end) {
    InteractionHistory h;
    const std::size_t begin = end >= window ? end - window : 0;
    for (std::size_t i = begin; i < end; ++i) h.push(history.records[i]);
    return h;
  };
  const EnvironmentDescriptor latest = discover(slice(n), kappa, eps_max, cfg);
  for (std::size_t end = n - window; end >= window; end -= window) {
    if (detect_change(latest, discover(slice(end), kappa, eps_max, cfg), threshold))
      return static_cast<std::int64_t>(n - end);
  }
  return static_cast<std::int64_t>(n);
}

struct LifelongParams {
  int h = 4;
  double eta1 = 1.0;
  double eta2 = 1e-3;
  double eta3 = 1e-4;
  LassoOptions lasso;
};

/// Identity of an absorbed environment: (device, environment index on that device).
using EnvKey = std::pair<int, int>;

struct Contribution {
  Eigen::VectorXd s;
  Eigen::VectorXd alpha;
  Eigen::MatrixXd gamma;
  Eigen::VectorXd phi;
};

struct CoupledDictionaries {
  int d = kPolicyDim;
  int dz = kFeatureDim;
  int h = 4;
  Eigen::MatrixXd L, D;
  Eigen::MatrixXd A_L, A_D;
  Eigen::VectorXd b_L, b_D;
  int env_count = 0;
  std::map<EnvKey, Contribution> absorbed;  // latest contribution per environment

  static CoupledDictionaries zeros(int d, int dz, int h) {
    if (d < 1 || dz < 1 || h < 1) throw ArgumentError("dictionary dimensions must be positive");
    CoupledDictionaries c;
    c.d = d;
    c.dz = dz;
    c.h = h;
    c.L = Eigen::MatrixXd::Zero(d, h);
    c.D = Eigen::MatrixXd::Zero(dz, h);
    c.A_L = Eigen::MatrixXd::Zero(d * h, d * h);
    c.A_D = Eigen::MatrixXd::Zero(dz * h, dz * h);
    c.b_L = Eigen::VectorXd::Zero(d * h);
    c.b_D = Eigen::VectorXd::Zero(dz * h);
    return c;
  }

  Eigen::MatrixXd stacked() const {
    Eigen::MatrixXd k(d + dz, h);
    k << L, D;
    return k;
  }
};

inline Eigen::MatrixXd stacked_weight(const Eigen::MatrixXd& gamma, int dz, double eta1) {
  const Eigen::Index d = gamma.rows();
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(d + dz, d + dz);
  q.topLeftCorner(d, d) = gamma;
  q.bottomRightCorner(dz, dz) = eta1 * Eigen::MatrixXd::Identity(dz, dz);
  return q;
}

/// Code of one environment against the current dictionaries:
/// argmin_s |[alpha; phi] - [L; D] s|^2_{blockdiag(gamma, eta1 I)} + eta2 |s|_1.
inline SparseCode fit_environment_code(const CoupledDictionaries& dicts, const Eigen::VectorXd& alpha,
                                       const Eigen::MatrixXd& gamma, const Eigen::VectorXd& phi,
                                       const LifelongParams& p) {
  Eigen::VectorXd target(dicts.d + dicts.dz);
  target << alpha, phi;
  return fit_sparse_code(dicts.stacked(), target, stacked_weight(gamma, dicts.dz, p.eta1), p.eta2, p.lasso);
}

namespace detail {

inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Adds sign * (s s^T (x) W, s (x) W target) to the accumulators (column-major vec).
inline void accumulate(Eigen::MatrixXd& A, Eigen::VectorXd& b, const Eigen::VectorXd& s, const Eigen::MatrixXd& w,
                       const Eigen::VectorXd& target, double sign) {
  A += sign * kron(s * s.transpose(), w);
  b += sign * kron(s, w * target);
}

inline Eigen::MatrixXd solve_basis(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, int z, double eta3, int rows,
                                   int cols) {
  const double inv_z = 1.0 / static_cast<double>(z);
  Eigen::MatrixXd sys = A * inv_z + eta3 * Eigen::MatrixXd::Identity(A.rows(), A.cols());
  sys = 0.5 * (sys + sys.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(sys);
  if (llt.info() != Eigen::Success) throw NumericError("regularized dictionary system is singular");
  const Eigen::VectorXd v = llt.solve(b * inv_z);
  if (!v.allFinite()) throw NumericError("dictionary solve produced non-finite values");
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), rows, cols);
}

}  // namespace detail

/// Absorbs (s, alpha, gamma, phi) for `key`. A revisit replaces the stored
/// contribution of that key; a new environment increments the count.
/// Returns true when the environment count grew.
inline bool update_dictionary(CoupledDictionaries& dicts, const EnvKey& key, const Eigen::VectorXd& s,
                              const Eigen::VectorXd& alpha, const Eigen::MatrixXd& gamma, const Eigen::VectorXd& phi,
                              bool is_new_env, const LifelongParams& p) {
  if (s.size() != dicts.h || alpha.size() != dicts.d || phi.size() != dicts.dz || gamma.rows() != dicts.d ||
      gamma.cols() != dicts.d)
    throw ArgumentError("dictionary update dimensions disagree");
  const Eigen::MatrixXd feat_w = p.eta1 * Eigen::MatrixXd::Identity(dicts.dz, dicts.dz);

  auto prev = dicts.absorbed.find(key);
  bool counted = false;
  if (prev != dicts.absorbed.end() && !is_new_env) {
    detail::accumulate(dicts.A_L, dicts.b_L, prev->second.s, prev->second.gamma, prev->second.alpha, -1.0);
    detail::accumulate(dicts.A_D, dicts.b_D, prev->second.s, feat_w, prev->second.phi, -1.0);
  } else {
    if (prev != dicts.absorbed.end()) {
      // A key reused for a new environment keeps its old contribution under a fresh key.
      int spare = -1;
      while (dicts.absorbed.count({key.first, spare})) --spare;
      dicts.absorbed.emplace(EnvKey{key.first, spare}, prev->second);
    }
    ++dicts.env_count;
    counted = true;
  }
  detail::accumulate(dicts.A_L, dicts.b_L, s, gamma, alpha, 1.0);
  detail::accumulate(dicts.A_D, dicts.b_D, s, feat_w, phi, 1.0);
  dicts.absorbed[key] = Contribution{s, alpha, gamma, phi};

  dicts.L = detail::solve_basis(dicts.A_L, dicts.b_L, dicts.env_count, p.eta3, dicts.d, dicts.h);
  dicts.D = detail::solve_basis(dicts.A_D, dicts.b_D, dicts.env_count, p.eta3, dicts.dz, dicts.h);
  return counted;
}

/// Replaces every all-zero column of L (with its paired D column) by the
/// unit-normalized latest alpha and phi.
inline void reinit_zero_columns(CoupledDictionaries& dicts, const Eigen::VectorXd& alpha, const Eigen::VectorXd& phi) {
  const double an = alpha.norm();
  const double pn = phi.norm();
  for (int j = 0; j < dicts.h; ++j) {
    if (dicts.L.col(j).cwiseAbs().maxCoeff() > 0.0) continue;
    if (an > 0.0) dicts.L.col(j) = alpha / an;
    if (pn > 0.0) dicts.D.col(j) = phi / pn;
  }
}

/// Full absorption step used during training: reinitialize unused columns,
/// fit the code against the current dictionaries and update both bases.
inline SparseCode absorb_environment(CoupledDictionaries& dicts, const EnvKey& key, const Eigen::VectorXd& alpha,
                                     const Eigen::MatrixXd& gamma, const Eigen::VectorXd& phi, bool is_new_env,
                                     const LifelongParams& p) {
  reinit_zero_columns(dicts, alpha, phi);
  SparseCode code = fit_environment_code(dicts, alpha, gamma, phi, p);
  update_dictionary(dicts, key, code.s, alpha, gamma, phi, is_new_env, p);
  return code;
}

/// Batch objective of the policy basis with codes held fixed:
/// (1/Z) sum |alpha - L s|^2_gamma + eta3 |L|_F^2.
inline double policy_basis_objective(const CoupledDictionaries& dicts, double eta3) {
  if (dicts.env_count == 0) return eta3 * dicts.L.squaredNorm();
  double acc = 0.0;
  for (const auto& [key, c] : dicts.absorbed) {
    const Eigen::VectorXd r = c.alpha - dicts.L * c.s;
    acc += r.dot(c.gamma * r);
  }
  return acc / dicts.env_count + eta3 * dicts.L.squaredNorm();
}

/// Policy for a device whose environment is still unknown: L times the mean absorbed code.
inline LinearPolicy prior_policy(const CoupledDictionaries& dicts, const LinearPolicy& templ = {}) {
  if (dicts.absorbed.empty()) throw StateError("prior policy needs trained dictionaries");
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dicts.h);
  for (const auto& [key, c] : dicts.absorbed) mean += c.s;
  mean /= static_cast<double>(dicts.absorbed.size());
  LinearPolicy out = templ;
  out.theta = dicts.L * mean;
  return out;
}

inline LinearPolicy zero_shot(const CoupledDictionaries& dicts, const Eigen::VectorXd& phi, const LifelongParams& p,
                              const LinearPolicy& templ = {}) {
  if (dicts.env_count < 1) throw StateError("zero-shot transfer needs trained dictionaries");
  const SparseCode code =
      fit_sparse_code(dicts.D, phi, Eigen::MatrixXd::Identity(dicts.dz, dicts.dz), p.eta2, p.lasso);
  LinearPolicy out = templ;
  out.theta = dicts.L * code.s;
  return out;
}

inline LinearPolicy zero_shot(const CoupledDictionaries& dicts, const EnvironmentDescriptor& desc,
                              const LifelongParams& p, const LinearPolicy& templ = {}) {
  return zero_shot(dicts, desc.phi, p, templ);
}

// ---- checkpoints ------------------------------------------------------------

namespace detail {

inline nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  if (j.at("rows").get<Eigen::Index>() != rows || j.at("cols").get<Eigen::Index>() != cols)
    throw ConfigError("checkpoint matrix has unexpected shape");
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ConfigError("checkpoint matrix data size mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  return m;
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j, Eigen::Index n) {
  return matrix_from_json(j, n, 1).col(0);
}

}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json dictionaries_to_json(const CoupledDictionaries& c) {
  nlohmann::json log = nlohmann::json::array();
  for (const auto& [key, e] : c.absorbed) {
    log.push_back({{"device", key.first},
                   {"env", key.second},
                   {"s", detail::matrix_json(e.s)},
                   {"alpha", detail::matrix_json(e.alpha)},
                   {"gamma", detail::matrix_json(e.gamma)},
                   {"phi", detail::matrix_json(e.phi)}});
  }
  return {{"format", "uavll-dictionaries"},
          {"version", kCheckpointVersion},
          {"d", c.d},
          {"dz", c.dz},
          {"h", c.h},
          {"env_count", c.env_count},
          {"L", detail::matrix_json(c.L)},
          {"D", detail::matrix_json(c.D)},
          {"A_L", detail::matrix_json(c.A_L)},
          {"b_L", detail::matrix_json(c.b_L)},
          {"A_D", detail::matrix_json(c.A_D)},
          {"b_D", detail::matrix_json(c.b_D)},
          {"environments", log}};
}

inline CoupledDictionaries dictionaries_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "uavll-dictionaries") throw ConfigError("not a dictionary checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
    auto c = CoupledDictionaries::zeros(j.at("d").get<int>(), j.at("dz").get<int>(), j.at("h").get<int>());
    c.env_count = j.at("env_count").get<int>();
    if (c.env_count < 0) throw ConfigError("negative environment count");
    c.L = detail::matrix_from_json(j.at("L"), c.d, c.h);
    c.D = detail::matrix_from_json(j.at("D"), c.dz, c.h);
    c.A_L = detail::matrix_from_json(j.at("A_L"), c.d * c.h, c.d * c.h);
    c.b_L = detail::vector_from_json(j.at("b_L"), c.d * c.h);
    c.A_D = detail::matrix_from_json(j.at("A_D"), c.dz * c.h, c.dz * c.h);
    c.b_D = detail::vector_from_json(j.at("b_D"), c.dz * c.h);
    for (const auto& e : j.at("environments")) {
      Contribution k{detail::vector_from_json(e.at("s"), c.h), detail::vector_from_json(e.at("alpha"), c.d),
                     detail::matrix_from_json(e.at("gamma"), c.d, c.d), detail::vector_from_json(e.at("phi"), c.dz)};
      c.absorbed[{e.at("device").get<int>(), e.at("env").get<int>()}] = std::move(k);
    }
    return c;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("malformed dictionary checkpoint: ") + ex.what());
  }
}

inline void save_checkpoint(const CoupledDictionaries& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
  out << dictionaries_to_json(c).dump(1) << '\n';
}

inline CoupledDictionaries load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("checkpoint is not valid JSON: ") + ex.what());
  }
  return dictionaries_from_json(j);
}

}  // namespace uavll
