#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <variant>
#include <vector>

#include "umrm/graph.hpp"
#include "umrm/model.hpp"
#include "umrm/rng.hpp"

namespace umrm {

namespace detail {

inline Tensor causal_mask(size_t len) {
  // additive mask; -1e30 underflows to an exact zero weight after softmax
  Tensor mask = Tensor::zeros({len, len});
  for (size_t i = 0; i < len; ++i)
    for (size_t j = i + 1; j < len; ++j) mask.at(i, j) = -1e30;
  return mask;
}

inline Tensor ffn_forward(Graph& g, const DenseFFN& f, const Tensor& x) {
  Tensor h = g.gelu(g.add(g.matmul(x, f.w_in), f.b_in));
  return g.add(g.matmul(h, f.w_out), f.b_out);
}

// Deterministic top-k of one affinity row: descending value, ties to the
// lowest expert index.
inline std::vector<size_t> top_k_indices(const double* s, size_t n, size_t k) {
  std::vector<size_t> sel;
  sel.reserve(k);
  std::vector<bool> taken(n, false);
  for (size_t pick = 0; pick < k; ++pick) {
    size_t best = n;
    for (size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (best == n || s[i] > s[best]) best = i;
    }
    taken[best] = true;
    sel.push_back(best);
  }
  return sel;
}

struct RowRouting {
  Tensor g_shared;    // 1x1
  Tensor g_selected;  // 1x(K-1), ordered like `selected`
  Tensor s_max;       // 1x1
  std::vector<size_t> selected;
};

// Routing weights for row `t` of the softmaxed affinity matrix `s`
// (n_tokens x n_normal). Differentiable through the selected entries; the
// selection itself is a piecewise-constant decision.
inline RowRouting route_row(Graph& g, const Tensor& s, size_t t, size_t k_minus_1) {
  const size_t n = s.cols();
  if (k_minus_1 > n) throw ConfigError("routing: K-1 exceeds normal expert count");
  RowRouting r;
  r.selected = top_k_indices(s.data().data() + t * n, n, k_minus_1);
  const size_t arg_max = r.selected[0];
  r.s_max = g.slice(s, t, t + 1, arg_max, arg_max + 1);
  r.g_shared = g.add(g.scale(r.s_max, -1.0), Tensor::scalar(1.0));
  std::vector<Tensor> picks;
  picks.reserve(k_minus_1);
  for (size_t i : r.selected) picks.push_back(g.slice(s, t, t + 1, i, i + 1));
  Tensor sel = k_minus_1 == 1 ? picks[0] : g.concat_cols(picks);
  r.g_selected = g.mul(g.softmax_rows(sel), r.s_max);
  return r;
}

// Eq-style mixture without the residual: g_s * E_s(u) + sum g_i * E_i(u).
// Unselected experts are never evaluated and receive no gradient.
inline Tensor moe_mix(Graph& g, const MoELayer& layer, const Tensor& u) {
  const size_t len = u.rows(), d = u.cols();
  const size_t k_minus_1 = layer.active_k - 1;
  Tensor s = g.softmax_rows(g.matmul(u, layer.router.logits));

  std::vector<Tensor> shared_gates;
  std::vector<Tensor> normal_rows;
  shared_gates.reserve(len);
  normal_rows.reserve(len);
  for (size_t t = 0; t < len; ++t) {
    RowRouting r = route_row(g, s, t, k_minus_1);
    shared_gates.push_back(r.g_shared);
    Tensor u_t = g.slice(u, t, t + 1, 0, d);
    Tensor acc;
    for (size_t p = 0; p < r.selected.size(); ++p) {
      Tensor w = g.slice(r.g_selected, 0, 1, p, p + 1);
      Tensor contrib = g.mul(ffn_forward(g, layer.normal[r.selected[p]], u_t), w);
      acc = acc.defined() ? g.add(acc, contrib) : contrib;
    }
    normal_rows.push_back(acc);
  }
  Tensor g_shared_col = len == 1 ? shared_gates[0] : g.concat_rows(shared_gates);
  Tensor shared_part = g.mul(ffn_forward(g, layer.shared, u), g_shared_col);
  Tensor normal_part = len == 1 ? normal_rows[0] : g.concat_rows(normal_rows);
  return g.add(shared_part, normal_part);
}

}  // namespace detail

// Hidden states (len x d_model) with exact causal masking.
inline Tensor forward_hidden(Graph& g, const RewardModel& m, std::span<const int> tokens) {
  const size_t len = tokens.size();
  if (len < 1 || len > m.cfg.max_seq) throw ConfigError("forward: sequence length out of range");
  for (int t : tokens)
    if (t < 0 || static_cast<size_t>(t) >= m.cfg.vocab_size)
      throw ConfigError("forward: token id out of range");

  std::vector<int> ids(tokens.begin(), tokens.end());
  std::vector<int> positions(len);
  std::iota(positions.begin(), positions.end(), 0);
  Tensor x = g.add(g.embedding(m.tok_emb, ids), g.embedding(m.pos_emb, positions));

  const size_t n_heads = m.cfg.n_heads;
  const size_t hd = m.cfg.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor mask = detail::causal_mask(len);

  for (const Block& b : m.blocks) {
    Tensor h = g.layer_norm(x, b.ln1.gamma, b.ln1.beta);
    Tensor q = g.add(g.matmul(h, b.attn.w_q), b.attn.b_q);
    Tensor k = g.add(g.matmul(h, b.attn.w_k), b.attn.b_k);
    Tensor v = g.add(g.matmul(h, b.attn.w_v), b.attn.b_v);
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (size_t hh = 0; hh < n_heads; ++hh) {
      Tensor qh = g.slice(q, 0, len, hh * hd, (hh + 1) * hd);
      Tensor kh = g.slice(k, 0, len, hh * hd, (hh + 1) * hd);
      Tensor vh = g.slice(v, 0, len, hh * hd, (hh + 1) * hd);
      Tensor scores = g.add(g.scale(g.matmul_nt(qh, kh), inv_sqrt_hd), mask);
      heads.push_back(g.matmul(g.softmax_rows(scores), vh));
    }
    Tensor ctx = n_heads == 1 ? heads[0] : g.concat_cols(heads);
    x = g.add(x, g.add(g.matmul(ctx, b.attn.w_o), b.attn.b_o));

    Tensor u = g.layer_norm(x, b.ln2.gamma, b.ln2.beta);
    if (const auto* dense = std::get_if<DenseFFN>(&b.ffn)) {
      x = g.add(x, detail::ffn_forward(g, *dense, u));
    } else {
      x = g.add(x, detail::moe_mix(g, std::get<MoELayer>(b.ffn), u));
    }
  }
  return g.layer_norm(x, m.final_norm.gamma, m.final_norm.beta);
}

// Scalar reward of prompt || response || EOS, read at the final token.
inline Tensor reward_score(Graph& g, const RewardModel& m, std::span<const int> prompt,
                           std::span<const int> response) {
  if (m.head_kind != HeadKind::reward) throw ConfigError("reward_score: model has no reward head");
  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end());
  seq.push_back(kEos);
  if (seq.size() > m.cfg.max_seq) throw ConfigError("reward_score: sequence exceeds max_seq");
  Tensor h = forward_hidden(g, m, seq);
  Tensor last = g.slice(h, seq.size() - 1, seq.size(), 0, m.cfg.d_model);
  return g.add(g.matmul(last, m.head_w), m.head_b);
}

inline double reward_score_value(const RewardModel& m, std::span<const int> prompt,
                                 std::span<const int> response) {
  Graph g(/*recording=*/false);
  return reward_score(g, m, prompt, response).value();
}

// Log-probability of each realized next token; length len-1, all values <= 0.
inline Tensor lm_log_probs(Graph& g, const RewardModel& m, std::span<const int> tokens) {
  if (m.head_kind != HeadKind::lm) throw ConfigError("lm_log_probs: model has no lm head");
  if (tokens.size() < 2) throw ConfigError("lm_log_probs: need at least two tokens");
  Tensor h = forward_hidden(g, m, tokens);
  Tensor logits = g.add(g.matmul(h, m.head_w), m.head_b);
  Tensor ctx = g.slice(logits, 0, tokens.size() - 1, 0, m.cfg.vocab_size);
  std::vector<int> next(tokens.begin() + 1, tokens.end());
  return g.scale(g.cross_entropy(ctx, next), -1.0);
}

// Sum of realized-token log-probs over positions [from, to) of the sequence.
// Position p covers the step that produced tokens[p].
inline Tensor span_log_prob(Graph& g, const RewardModel& m, std::span<const int> tokens,
                            size_t from, size_t to) {
  Tensor ll = lm_log_probs(g, m, tokens);
  if (from < 1 || to <= from || to > tokens.size())
    throw ConfigError("span_log_prob: bad position range");
  return g.sum(g.slice(ll, 0, 1, from - 1, to - 1));
}

struct SampledResponse {
  std::vector<int> tokens;  // content tokens only, EOS stripped
  bool hit_eos = false;
};

// Autoregressive sampling at a temperature; temperature <= 0 is greedy.
// PAD and BOS are never emitted.
inline SampledResponse sample_response(const RewardModel& m, std::span<const int> prompt,
                                       size_t max_new_tokens, double temperature, Rng& rng) {
  if (m.head_kind != HeadKind::lm) throw ConfigError("sample_response: model has no lm head");
  std::vector<int> seq;
  seq.reserve(prompt.size() + max_new_tokens + 1);
  seq.push_back(kBos);
  seq.insert(seq.end(), prompt.begin(), prompt.end());

  SampledResponse out;
  for (size_t step = 0; step < max_new_tokens && seq.size() < m.cfg.max_seq; ++step) {
    Graph g(/*recording=*/false);
    Tensor h = forward_hidden(g, m, seq);
    Tensor last = g.slice(h, seq.size() - 1, seq.size(), 0, m.cfg.d_model);
    Tensor logits = g.add(g.matmul(last, m.head_w), m.head_b);
    std::vector<double>& z = logits.data();
    z[kPad] = -1e30;
    z[kBos] = -1e30;
    int tok;
    if (temperature <= 0.0) {
      size_t best = 0;
      for (size_t j = 1; j < z.size(); ++j)
        if (z[j] > z[best]) best = j;
      tok = static_cast<int>(best);
    } else {
      Graph g2(/*recording=*/false);
      Tensor probs = g2.softmax_rows(g2.scale(logits, 1.0 / temperature));
      tok = static_cast<int>(rng.categorical(probs.data()));
    }
    if (tok == kEos) {
      out.hit_eos = true;
      break;
    }
    seq.push_back(tok);
    out.tokens.push_back(tok);
  }
  return out;
}

}  // namespace umrm
