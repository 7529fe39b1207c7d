#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "umrm/common.hpp"
#include "umrm/rng.hpp"

namespace umrm {

// Dense row-major f64 tensor. Rank 1 or 2 covers everything in this artifact;
// a rank-1 tensor behaves as a single row where a row op needs one.
// `grad` is allocated iff requires_grad.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->value.assign(count(t.d_->shape), 0.0);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor from(std::vector<size_t> shape, std::vector<double> values,
                     bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (values.size() != t.size()) throw ConfigError("tensor: value count does not match shape");
    t.d_->value = std::move(values);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor randn(std::vector<size_t> shape, Rng& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& x : t.d_->value) x = rng.normal(0.0, stddev);
    return t;
  }

  bool defined() const { return d_ != nullptr; }

  const std::vector<size_t>& shape() const { return d_->shape; }
  size_t rank() const { return d_->shape.size(); }
  size_t size() const { return d_->value.size(); }
  size_t rows() const { return rank() == 1 ? 1 : d_->shape[0]; }
  size_t cols() const { return rank() == 1 ? d_->shape[0] : d_->shape[1]; }

  // Tensor is a shared handle: a const Tensor still exposes mutable buffers,
  // like a shared_ptr-to-mutable.
  std::vector<double>& data() const { return d_->value; }

  double& at(size_t r, size_t c) const { return d_->value[r * cols() + c]; }

  // Scalar accessor; valid only for size-1 tensors.
  double value() const {
    if (size() != 1) throw ConfigError("tensor: value() on non-scalar");
    return d_->value[0];
  }

  bool requires_grad() const { return d_->requires_grad; }

  void set_requires_grad(bool on) {
    d_->requires_grad = on;
    if (on) {
      d_->grad.assign(d_->value.size(), 0.0);
    } else {
      d_->grad.clear();
      d_->grad.shrink_to_fit();
    }
  }

  std::vector<double>& grad() const { return d_->grad; }

  void zero_grad() const {
    for (double& g : d_->grad) g = 0.0;
  }

  // Deep copy; the clone never aliases this tensor's buffers.
  Tensor clone() const {
    Tensor t = from(d_->shape, d_->value, d_->requires_grad);
    if (d_->requires_grad) t.d_->grad = d_->grad;
    return t;
  }

  bool same_data(const Tensor& other) const { return d_ == other.d_; }

  bool all_finite() const {
    for (double v : d_->value) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  static size_t count(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) {
      if (d == 0) throw ConfigError("tensor: zero dimension");
      n *= d;
    }
    return n;
  }

 private:
  struct Data {
    std::vector<size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Data> d_;
};

inline uint64_t content_hash(const Tensor& t, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(t.data().data(), t.data().size() * sizeof(double), h);
}

}  // namespace umrm
