#pragma once

#include <cstddef>
#include <variant>
#include <vector>

#include "umrm/forward.hpp"
#include "umrm/model.hpp"
#include "umrm/rng.hpp"

namespace umrm {

struct UpcycleConfig {
  size_t n_normal_experts = 3;  // N-1; total experts N include the shared one
  size_t active_k = 2;          // K, shared expert included
  double noise_scale = 0.0;     // perturbation of the normal expert copies

  void validate() const {
    if (n_normal_experts < 1) throw ConfigError("upcycle: need at least one normal expert");
    if (active_k < 2 || active_k > n_normal_experts + 1)
      throw ConfigError("upcycle: K must satisfy 2 <= K <= N");
  }
};

// Routing weights for one token: the shared-expert weight, the selected
// normal experts and their weights. Always sums to 1: the shared weight is
// 1 - s_max and the selected weights renormalize to s_max.
struct RoutingDecision {
  double g_shared = 0.0;
  std::vector<size_t> selected;
  std::vector<double> g_selected;
  double s_max = 0.0;
};

inline RoutingDecision compute_routing(const Tensor& hidden, const Router& router,
                                       size_t active_k) {
  Graph g(/*recording=*/false);
  Tensor h = hidden.rank() == 1
                 ? Tensor::from({1, hidden.size()}, hidden.data())
                 : hidden;
  Tensor s = g.softmax_rows(g.matmul(h, router.logits));
  detail::RowRouting r = detail::route_row(g, s, 0, active_k - 1);
  RoutingDecision d;
  d.g_shared = r.g_shared.value();
  d.s_max = r.s_max.value();
  d.selected = r.selected;
  d.g_selected = r.g_selected.data();
  return d;
}

// Replace every dense FFN by a shared-expert MoE layer initialized from it.
// With noise_scale = 0 the upcycled model computes exactly the same function
// as the source (weights sum to 1 over identical experts).
inline RewardModel upcycle(const RewardModel& dense, const UpcycleConfig& cfg, Rng& noise_rng) {
  cfg.validate();
  if (is_moe(dense)) throw ConfigError("upcycle: model is already MoE");
  RewardModel m = clone_model(dense);
  for (Block& b : m.blocks) {
    DenseFFN source = std::get<DenseFFN>(b.ffn);
    MoELayer layer;
    layer.shared = source;
    layer.active_k = cfg.active_k;
    for (size_t e = 0; e < cfg.n_normal_experts; ++e) {
      DenseFFN copy = detail::clone_ffn(source);
      if (cfg.noise_scale != 0.0) {
        for (Tensor* t : {&copy.w_in, &copy.b_in, &copy.w_out, &copy.b_out})
          for (double& v : t->data()) v += noise_rng.normal(0.0, cfg.noise_scale);
      }
      layer.normal.push_back(std::move(copy));
    }
    layer.router.logits = Tensor::zeros({m.cfg.d_model, cfg.n_normal_experts}, true);
    b.ffn = std::move(layer);
  }
  return m;
}

inline RewardModel upcycle(const RewardModel& dense, const UpcycleConfig& cfg,
                           uint64_t noise_seed = 0) {
  Rng rng(substream(noise_seed, "upcycle-noise"));
  return upcycle(dense, cfg, rng);
}

// Standalone MoE layer application, residual included:
//   out_t = g_shared E_s(u_t) + sum_{i in selected} g_i E_i(u_t) + u_t
inline Tensor moe_layer_forward(Graph& g, const Tensor& hidden, const MoELayer& layer) {
  return g.add(detail::moe_mix(g, layer, hidden), hidden);
}

}  // namespace umrm
