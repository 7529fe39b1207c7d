#pragma once

#include <cmath>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "umrm/adam.hpp"
#include "umrm/forward.hpp"
#include "umrm/model.hpp"
#include "umrm/preference.hpp"

namespace umrm {

// Shared-expert rate plus per-layer mixing logits. The normal-expert weights
// are always alpha = (1 - lambda) * softmax(logits), so the sum constraint
// holds by parameterization rather than by projection.
struct MergeParams {
  double lambda = 0.5;
  std::vector<std::vector<double>> mixing_logits;  // one vector per layer
};

struct MergeProvenance {
  std::string source_hash;
  double lambda = 0.5;
  std::vector<std::vector<double>> alpha;  // per layer, per normal expert
};

struct MergedModel {
  RewardModel model;  // dense blocks only
  MergeProvenance provenance;
};

inline std::vector<double> alpha_from_logits(std::span<const double> logits, double lambda) {
  if (!(lambda > 0.0 && lambda < 1.0)) throw ConfigError("merge: lambda must be in (0,1)");
  if (logits.empty()) throw ConfigError("merge: no mixing logits");
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> alpha(logits.size());
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    alpha[i] = std::exp(logits[i] - mx);
    z += alpha[i];
  }
  for (double& a : alpha) a = (1.0 - lambda) * (a / z);
  return alpha;
}

// W = lambda W_s + sum_i alpha_i W_i, applied to every weight and bias.
inline DenseFFN merge_layer(const MoELayer& layer, double lambda, std::span<const double> alpha) {
  if (alpha.size() != layer.normal.size()) throw ConfigError("merge: alpha count mismatch");
  double sum = 0.0;
  for (double a : alpha) {
    if (a < 0.0) throw ConfigError("merge: negative alpha");
    sum += a;
  }
  if (std::abs(sum - (1.0 - lambda)) > 1e-10)
    throw ConfigError("merge: alpha does not sum to 1 - lambda");

  auto combine = [&](auto pick) {
    const Tensor& base = pick(layer.shared);
    Tensor out = Tensor::zeros(base.shape(), true);
    for (size_t j = 0; j < out.size(); ++j) out.data()[j] = lambda * base.data()[j];
    for (size_t e = 0; e < layer.normal.size(); ++e) {
      const Tensor& t = pick(layer.normal[e]);
      for (size_t j = 0; j < out.size(); ++j) out.data()[j] += alpha[e] * t.data()[j];
    }
    return out;
  };
  DenseFFN merged;
  merged.w_in = combine([](const DenseFFN& f) -> const Tensor& { return f.w_in; });
  merged.b_in = combine([](const DenseFFN& f) -> const Tensor& { return f.b_in; });
  merged.w_out = combine([](const DenseFFN& f) -> const Tensor& { return f.w_out; });
  merged.b_out = combine([](const DenseFFN& f) -> const Tensor& { return f.b_out; });
  return merged;
}

// Graph-side merge used while fitting: alpha_row is a live (1 x n) tensor and
// the returned FFN tensors are differentiable intermediates.
inline DenseFFN merge_layer_graph(Graph& g, const MoELayer& layer, double lambda,
                                  const Tensor& alpha_row) {
  auto combine = [&](auto pick) {
    Tensor acc = g.scale(pick(layer.shared), lambda);
    for (size_t e = 0; e < layer.normal.size(); ++e) {
      Tensor a_e = g.slice(alpha_row, 0, 1, e, e + 1);
      acc = g.add(acc, g.mul(pick(layer.normal[e]), a_e));
    }
    return acc;
  };
  DenseFFN merged;
  merged.w_in = combine([](const DenseFFN& f) -> const Tensor& { return f.w_in; });
  merged.b_in = combine([](const DenseFFN& f) -> const Tensor& { return f.b_in; });
  merged.w_out = combine([](const DenseFFN& f) -> const Tensor& { return f.w_out; });
  merged.b_out = combine([](const DenseFFN& f) -> const Tensor& { return f.b_out; });
  return merged;
}

// Collapse a MoE model back to dense. FFN tensors are the (lambda, alpha)
// average; every other tensor is copied verbatim.
inline MergedModel merge_model(const RewardModel& moe, const MergeParams& params) {
  if (!is_moe(moe)) throw ConfigError("merge: model has no MoE layers");
  if (params.mixing_logits.size() != moe.blocks.size())
    throw ConfigError("merge: logit count does not match layer count");

  MergedModel out;
  out.model = clone_model(moe);
  out.provenance.source_hash = hex64(model_hash(moe));
  out.provenance.lambda = params.lambda;
  for (size_t l = 0; l < out.model.blocks.size(); ++l) {
    const auto& layer = std::get<MoELayer>(moe.blocks[l].ffn);
    if (params.mixing_logits[l].size() != layer.normal.size())
      throw ConfigError("merge: expert count mismatch at layer " + std::to_string(l));
    std::vector<double> alpha = alpha_from_logits(params.mixing_logits[l], params.lambda);
    out.model.blocks[l].ffn = merge_layer(layer, params.lambda, alpha);
    out.provenance.alpha.push_back(std::move(alpha));
  }
  return out;
}

struct FitMergeResult {
  MergedModel merged;
  MergeParams params;
  std::vector<double> losses;
  double max_constraint_residual = 0.0;  // max over steps of |sum(alpha) - (1-lambda)|
};

// Learn the mixing logits by BT-loss descent of the merged dense model with
// every expert and backbone tensor frozen.
inline FitMergeResult fit_merge(const RewardModel& moe, const PreferenceDataset& prefs,
                                double lambda, size_t steps, double lr, size_t batch_size,
                                uint64_t seed) {
  if (!is_moe(moe)) throw ConfigError("fit_merge: model has no MoE layers");
  if (prefs.empty()) throw ConfigError("fit_merge: empty dataset");
  if (!(lambda > 0.0 && lambda < 1.0)) throw ConfigError("fit_merge: lambda must be in (0,1)");

  RewardModel frozen = clone_model(moe);
  set_trainable(frozen, false);

  std::vector<Tensor> logits;
  for (const Block& b : frozen.blocks) {
    const auto& layer = std::get<MoELayer>(b.ffn);
    logits.push_back(Tensor::zeros({1, layer.normal.size()}, true));
  }
  AdamConfig acfg;
  acfg.lr = lr;
  Adam opt(logits, acfg);

  FitMergeResult result;
  batch_size = std::min(batch_size, prefs.size());
  for (size_t step = 0; step < steps; ++step) {
    Rng rng(substream(seed, "fit-merge", step));
    std::vector<size_t> indices(batch_size);
    for (size_t& i : indices)
      i = static_cast<size_t>(rng.randint(0, static_cast<int64_t>(prefs.size()) - 1));

    opt.zero_grad();
    Graph g;
    RewardModel candidate = frozen;  // shallow copy, tensors shared
    for (size_t l = 0; l < frozen.blocks.size(); ++l) {
      Tensor alpha_row = g.scale(g.softmax_rows(logits[l]), 1.0 - lambda);
      double sum = 0.0;
      for (double a : alpha_row.data()) sum += a;
      result.max_constraint_residual =
          std::max(result.max_constraint_residual, std::abs(sum - (1.0 - lambda)));
      candidate.blocks[l].ffn =
          merge_layer_graph(g, std::get<MoELayer>(frozen.blocks[l].ffn), lambda, alpha_row);
    }
    Tensor loss = bt_loss(g, candidate, prefs, indices);
    if (!std::isfinite(loss.value())) throw NumericError("fit_merge: non-finite loss");
    result.losses.push_back(loss.value());
    g.backward(loss);
    opt.step();
  }

  result.params.lambda = lambda;
  for (const Tensor& t : logits) result.params.mixing_logits.push_back(t.data());
  result.merged = merge_model(moe, result.params);
  return result;
}

}  // namespace umrm
