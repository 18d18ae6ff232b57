#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "promptblend/error.hpp"
#include "promptblend/tensor.hpp"

namespace promptblend {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (!(lr >= 0.0)) {
      throw ParameterError("AdamW lr must be >= 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ParameterError("AdamW betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) {
      throw ParameterError("AdamW eps must be > 0");
    }
    if (!(weight_decay >= 0.0)) {
      throw ParameterError("AdamW weight_decay must be >= 0");
    }
  }
};

/// Adam with decoupled weight decay and bias correction.
///
/// Moments are created lazily on the first step and are keyed by parameter
/// position, so the same parameter list must be passed on every call.
class AdamW {
 public:
  explicit AdamW(AdamWHyper hyper = {}) : hyper_(hyper) { hyper_.validate(); }

  /// Applies one update. Gradients are read, not cleared.
  void step(std::vector<Tensor>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) {
        throw StateError("AdamW: parameter " + std::to_string(i) + " has no gradient");
      }
    }
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) {
      throw StateError("AdamW: parameter list changed between steps");
    }
    ++step_count_;
    const double t = static_cast<double>(step_count_);
    const double bias1 = 1.0 - std::pow(hyper_.beta1, t);
    const double bias2 = 1.0 - std::pow(hyper_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto data = params[i].mutable_data();
      auto grad = params[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.size() != data.size()) {
        throw StateError("AdamW: moment shape drifted for parameter " + std::to_string(i));
      }
      for (std::size_t j = 0; j < data.size(); ++j) {
        data[j] -= hyper_.lr * hyper_.weight_decay * data[j];
        m[j] = hyper_.beta1 * m[j] + (1.0 - hyper_.beta1) * grad[j];
        v[j] = hyper_.beta2 * v[j] + (1.0 - hyper_.beta2) * grad[j] * grad[j];
        const double m_hat = m[j] / bias1;
        const double v_hat = v[j] / bias2;
        data[j] -= hyper_.lr * m_hat / (std::sqrt(v_hat) + hyper_.eps);
      }
    }
  }

  std::size_t step_count() const { return step_count_; }
  const AdamWHyper& hyper() const { return hyper_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamWHyper hyper_;
  std::size_t step_count_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

inline void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) {
    p.zero_grad();
  }
}

}  // namespace promptblend
