#pragma once

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "uavll/common.hpp"

namespace uavll {

struct LassoOptions {
  double tolerance = 1e-8;  // largest coordinate move in a sweep
  int max_sweeps = 10000;
};

struct SparseCode {
  Eigen::VectorXd s;
  int support_size = 0;
  int sweeps = 0;
  bool converged = false;

  static constexpr double kSupportEps = 1e-8;

  static int count_support(const Eigen::VectorXd& v) {
    return static_cast<int>((v.array().abs() > kSupportEps).count());
  }
};

inline double soft_threshold(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

/// Cyclic coordinate descent on  s'Gs - 2c's + eta2 |s|_1  with G PSD.
/// This is the Gram form of  |beta - K s|^2_Q + eta2 |s|_1  with G = K'QK, c = K'Q beta.
inline SparseCode lasso_gram(const Eigen::MatrixXd& gram, const Eigen::VectorXd& corr, double eta2,
                             const LassoOptions& opt = {}, const Eigen::VectorXd* warm = nullptr) {
  const Eigen::Index h = gram.rows();
  SparseCode out;
  out.s = warm ? *warm : Eigen::VectorXd::Zero(h);
  const double half_pen = 0.5 * eta2;
  for (out.sweeps = 0; out.sweeps < opt.max_sweeps;) {
    ++out.sweeps;
    double max_move = 0.0;
    for (Eigen::Index j = 0; j < h; ++j) {
      const double gjj = gram(j, j);
      double next = 0.0;
      if (gjj > 0.0) {
        const double partial = corr(j) - gram.row(j).dot(out.s) + gjj * out.s(j);
        next = soft_threshold(partial, half_pen) / gjj;
      }
      max_move = std::max(max_move, std::abs(next - out.s(j)));
      out.s(j) = next;
    }
    if (max_move < opt.tolerance) {
      out.converged = true;
      break;
    }
  }
  out.support_size = SparseCode::count_support(out.s);
  return out;
}

/// Largest violation of the subgradient optimality conditions.
inline double lasso_kkt_residual(const Eigen::MatrixXd& gram, const Eigen::VectorXd& corr, double eta2,
                                 const Eigen::VectorXd& s) {
  const Eigen::VectorXd grad = 2.0 * (gram * s - corr);
  double worst = 0.0;
  for (Eigen::Index j = 0; j < s.size(); ++j) {
    const double r = s(j) != 0.0 ? std::abs(grad(j) + eta2 * (s(j) > 0.0 ? 1.0 : -1.0))
                                  : std::max(0.0, std::abs(grad(j)) - eta2);
    worst = std::max(worst, r);
  }
  return worst;
}

inline void require_psd(const Eigen::MatrixXd& q, const char* what) {
  if (q.rows() != q.cols()) throw NumericError(std::string(what) + " is not square");
  const double scale = std::max(1.0, q.cwiseAbs().maxCoeff());
  if ((q - q.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw NumericError(std::string(what) + " is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(q, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-9 * scale)
    throw NumericError(std::string(what) + " is not positive semi-definite");
}

/// argmin_s |beta - K s|^2_Q + eta2 |s|_1.
inline SparseCode fit_sparse_code(const Eigen::MatrixXd& basis, const Eigen::VectorXd& target,
                                  const Eigen::MatrixXd& weight, double eta2, const LassoOptions& opt = {}) {
  if (basis.rows() != target.size() || weight.rows() != target.size())
    throw ArgumentError("sparse code dimensions disagree");
  require_psd(weight, "weight matrix");
  const Eigen::MatrixXd qk = weight * basis;
  const Eigen::MatrixXd gram = basis.transpose() * qk;
  const Eigen::VectorXd corr = qk.transpose() * target;
  return lasso_gram(0.5 * (gram + gram.transpose()), corr, eta2, opt);
}

inline double sparse_objective(const Eigen::MatrixXd& basis, const Eigen::VectorXd& target,
                               const Eigen::MatrixXd& weight, double eta2, const Eigen::VectorXd& s) {
  const Eigen::VectorXd r = target - basis * s;
  return r.dot(weight * r) + eta2 * s.lpNorm<1>();
}

}  // namespace uavll
