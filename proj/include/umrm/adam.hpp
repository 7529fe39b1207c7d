#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "umrm/common.hpp"
#include "umrm/tensor.hpp"

namespace umrm {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Moment buffers are keyed
// by position, so the list must not change between steps.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      Tensor& p = params_[pi];
      const std::vector<double>& g = p.grad();
      for (size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(g[i])) throw NumericError("adam: non-finite gradient");
        m_[pi][i] = cfg_.beta1 * m_[pi][i] + (1.0 - cfg_.beta1) * g[i];
        v_[pi][i] = cfg_.beta2 * v_[pi][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m_[pi][i] / bc1;
        const double vhat = v_[pi][i] / bc2;
        p.data()[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t step_ = 0;
};

}  // namespace umrm
