#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "uavll/common.hpp"

namespace uavll {

/// Fully connected network with tanh hidden layers and a linear output layer.
class Mlp {
 public:
  struct Cache {
    std::vector<Eigen::VectorXd> act;  // act[0] is the input, act[k] the output of layer k
  };

  Mlp() = default;

  /// Glorot-uniform weights, zero biases. With `zero_output` the last layer
  /// starts at zero so every output is initially 0.
  Mlp(const std::vector<int>& sizes, Rng& rng, bool zero_output = false) {
    if (sizes.size() < 2) throw ArgumentError("network needs at least an input and an output layer");
    for (int s : sizes)
      if (s < 1) throw ArgumentError("layer sizes must be positive");
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
      const int in = sizes[k], out = sizes[k + 1];
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> u(-limit, limit);
      Eigen::MatrixXd w(out, in);
      const bool last = k + 2 == sizes.size();
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = (last && zero_output) ? 0.0 : u(rng);
      weights_.push_back(std::move(w));
      biases_.push_back(Eigen::VectorXd::Zero(out));
    }
  }

  int input_size() const { return static_cast<int>(weights_.front().cols()); }
  int output_size() const { return static_cast<int>(weights_.back().rows()); }
  std::size_t layer_count() const { return weights_.size(); }

  Eigen::VectorXd forward(const Eigen::VectorXd& x, Cache* cache = nullptr) const {
    if (x.size() != input_size()) throw ArgumentError("network input has wrong size");
    Eigen::VectorXd a = x;
    if (cache) {
      cache->act.clear();
      cache->act.push_back(a);
    }
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      Eigen::VectorXd z = weights_[k] * a + biases_[k];
      a = k + 1 < weights_.size() ? Eigen::VectorXd(z.array().tanh()) : z;
      if (cache) cache->act.push_back(a);
    }
    return a;
  }

  /// Gradient of a scalar loss with respect to all parameters, given the
  /// loss gradient with respect to the output. Layout matches `parameters()`.
  Eigen::VectorXd backward(const Cache& cache, const Eigen::VectorXd& d_out) const {
    Eigen::VectorXd grad(parameter_count());
    Eigen::VectorXd delta = d_out;
    std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> layer_grads(weights_.size());
    for (std::size_t k = weights_.size(); k-- > 0;) {
      layer_grads[k] = {delta * cache.act[k].transpose(), delta};
      if (k > 0) {
        const Eigen::ArrayXd a = cache.act[k].array();
        delta = ((weights_[k].transpose() * delta).array() * (1.0 - a * a)).matrix();
      }
    }
    Eigen::Index pos = 0;
    for (const auto& [gw, gb] : layer_grads) {
      grad.segment(pos, gw.size()) = Eigen::Map<const Eigen::VectorXd>(gw.data(), gw.size());
      pos += gw.size();
      grad.segment(pos, gb.size()) = gb;
      pos += gb.size();
    }
    return grad;
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (std::size_t k = 0; k < weights_.size(); ++k) n += weights_[k].size() + biases_[k].size();
    return n;
  }

  Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(parameter_count());
    Eigen::Index pos = 0;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      p.segment(pos, weights_[k].size()) = Eigen::Map<const Eigen::VectorXd>(weights_[k].data(), weights_[k].size());
      pos += weights_[k].size();
      p.segment(pos, biases_[k].size()) = biases_[k];
      pos += biases_[k].size();
    }
    return p;
  }

  void set_parameters(const Eigen::VectorXd& p) {
    if (p.size() != parameter_count()) throw ArgumentError("parameter vector has wrong size");
    Eigen::Index pos = 0;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      Eigen::Map<Eigen::VectorXd>(weights_[k].data(), weights_[k].size()) = p.segment(pos, weights_[k].size());
      pos += weights_[k].size();
      biases_[k] = p.segment(pos, biases_[k].size());
      pos += biases_[k].size();
    }
  }

  /// Plain gradient step: params -= rate * grad.
  void descend(const Eigen::VectorXd& grad, double rate) {
    if (rate == 0.0) return;
    set_parameters(parameters() - rate * grad);
  }

  nlohmann::json to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      std::vector<double> w(weights_[k].data(), weights_[k].data() + weights_[k].size());
      std::vector<double> b(biases_[k].data(), biases_[k].data() + biases_[k].size());
      layers.push_back({{"in", weights_[k].cols()}, {"out", weights_[k].rows()}, {"w_colmajor", w}, {"b", b}});
    }
    return layers;
  }

 private:
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::VectorXd> biases_;
};

}  // namespace uavll
