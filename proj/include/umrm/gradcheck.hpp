#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "umrm/graph.hpp"
#include "umrm/tensor.hpp"

namespace umrm {

// Central-difference gradient oracle. `program` must build a scalar from the
// given parameters inside the supplied graph; the same callable is reused for
// the analytic pass and the perturbed value-only passes.
//
// Returns max over all parameter coordinates of
//   |analytic - central| / max(1, |central|).
// Reports only; never asserts.
inline double finite_diff_check(const std::function<Tensor(Graph&)>& program,
                                const std::vector<Tensor>& params, double h = 1e-5) {
  for (const Tensor& p : params) p.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    Tensor loss = program(g);
    g.backward(loss);
    for (const Tensor& p : params) analytic.push_back(p.grad());
  }

  auto eval = [&]() {
    Graph g(/*recording=*/false);
    return program(g).value();
  };

  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (size_t i = 0; i < p.size(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + h;
      const double fp = eval();
      p.data()[i] = orig - h;
      const double fm = eval();
      p.data()[i] = orig;
      const double central = (fp - fm) / (2.0 * h);
      const double rel =
          std::abs(analytic[pi][i] - central) / std::max(1.0, std::abs(central));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace umrm
