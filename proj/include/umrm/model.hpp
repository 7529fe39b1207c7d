#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "umrm/common.hpp"
#include "umrm/rng.hpp"
#include "umrm/tensor.hpp"

namespace umrm {

// Vocabulary layout shared by every model in the artifact: three reserved
// ids, then content tokens.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstContentToken = 3;

struct TransformerConfig {
  size_t vocab_size = 67;
  size_t d_model = 64;
  size_t n_layers = 4;
  size_t n_heads = 4;
  size_t d_ff = 256;
  size_t max_seq = 64;
  uint64_t seed = 0;

  void validate() const {
    if (vocab_size <= kFirstContentToken || d_model == 0 || n_layers == 0 || n_heads == 0 ||
        d_ff == 0)
      throw ConfigError("transformer config: all counts must be positive");
    if (d_model % n_heads != 0) throw ConfigError("transformer config: d_model % n_heads != 0");
    if (max_seq < 2) throw ConfigError("transformer config: max_seq must be >= 2");
  }

  size_t head_dim() const { return d_model / n_heads; }
};

enum class HeadKind { reward, lm };

inline const char* head_kind_name(HeadKind k) { return k == HeadKind::reward ? "reward" : "lm"; }

inline HeadKind head_kind_from_name(const std::string& s) {
  if (s == "reward") return HeadKind::reward;
  if (s == "lm") return HeadKind::lm;
  throw ConfigError("unknown head kind: " + s);
}

struct LayerNormParams {
  Tensor gamma, beta;
};

struct AttentionParams {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
};

struct DenseFFN {
  Tensor w_in, b_in, w_out, b_out;
};

// Affinity logits for the normal experts only; the shared expert is always
// active and has no router column.
struct Router {
  Tensor logits;  // d_model x n_normal
};

struct MoELayer {
  DenseFFN shared;
  std::vector<DenseFFN> normal;
  Router router;
  size_t active_k = 2;  // experts active per token, shared one included
};

struct Block {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  std::variant<DenseFFN, MoELayer> ffn;
};

// Decoder-only transformer with pre-norm residual blocks, learned absolute
// positional embeddings and either a scalar reward head or an LM head.
struct RewardModel {
  TransformerConfig cfg;
  HeadKind head_kind = HeadKind::reward;
  Tensor tok_emb;  // vocab x d_model
  Tensor pos_emb;  // max_seq x d_model
  std::vector<Block> blocks;
  LayerNormParams final_norm;
  Tensor head_w;  // d_model x 1 (reward) or d_model x vocab (lm)
  Tensor head_b;
};

inline bool is_moe(const RewardModel& m) {
  for (const Block& b : m.blocks)
    if (std::holds_alternative<MoELayer>(b.ffn)) return true;
  return false;
}

namespace detail {

inline Tensor init_matrix(std::vector<size_t> shape, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, 0.02, /*requires_grad=*/true);
}

inline LayerNormParams init_layer_norm(size_t d) {
  return {Tensor::from({d}, std::vector<double>(d, 1.0), true), Tensor::zeros({d}, true)};
}

inline DenseFFN init_ffn(size_t d, size_t f, Rng& rng) {
  return {init_matrix({d, f}, rng), Tensor::zeros({f}, true), init_matrix({f, d}, rng),
          Tensor::zeros({d}, true)};
}

inline DenseFFN clone_ffn(const DenseFFN& f) {
  return {f.w_in.clone(), f.b_in.clone(), f.w_out.clone(), f.b_out.clone()};
}

}  // namespace detail

// Fresh model from the config seed. Matrices are normal(0, 0.02); biases,
// layer-norm shifts and the reward head start at zero, which makes the cold
// Bradley-Terry loss exactly ln 2.
inline RewardModel make_model(const TransformerConfig& cfg, HeadKind head) {
  cfg.validate();
  Rng rng(substream(cfg.seed, "init"));
  RewardModel m;
  m.cfg = cfg;
  m.head_kind = head;
  m.tok_emb = detail::init_matrix({cfg.vocab_size, cfg.d_model}, rng);
  m.pos_emb = detail::init_matrix({cfg.max_seq, cfg.d_model}, rng);
  for (size_t l = 0; l < cfg.n_layers; ++l) {
    Block b;
    b.ln1 = detail::init_layer_norm(cfg.d_model);
    b.attn = {detail::init_matrix({cfg.d_model, cfg.d_model}, rng),
              Tensor::zeros({cfg.d_model}, true),
              detail::init_matrix({cfg.d_model, cfg.d_model}, rng),
              Tensor::zeros({cfg.d_model}, true),
              detail::init_matrix({cfg.d_model, cfg.d_model}, rng),
              Tensor::zeros({cfg.d_model}, true),
              detail::init_matrix({cfg.d_model, cfg.d_model}, rng),
              Tensor::zeros({cfg.d_model}, true)};
    b.ln2 = detail::init_layer_norm(cfg.d_model);
    b.ffn = detail::init_ffn(cfg.d_model, cfg.d_ff, rng);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = detail::init_layer_norm(cfg.d_model);
  if (head == HeadKind::reward) {
    m.head_w = Tensor::zeros({cfg.d_model, 1}, true);
    m.head_b = Tensor::zeros({1}, true);
  } else {
    m.head_w = detail::init_matrix({cfg.d_model, cfg.vocab_size}, rng);
    m.head_b = Tensor::zeros({cfg.vocab_size}, true);
  }
  return m;
}

// Checkpoint tensor directory. expert0 is always the shared expert.
inline std::vector<std::pair<std::string, Tensor>> named_params(const RewardModel& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", m.tok_emb);
  out.emplace_back("pos_emb", m.pos_emb);
  for (size_t l = 0; l < m.blocks.size(); ++l) {
    const Block& b = m.blocks[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gamma", b.ln1.gamma);
    out.emplace_back(p + "ln1.beta", b.ln1.beta);
    out.emplace_back(p + "attn.W_q", b.attn.w_q);
    out.emplace_back(p + "attn.b_q", b.attn.b_q);
    out.emplace_back(p + "attn.W_k", b.attn.w_k);
    out.emplace_back(p + "attn.b_k", b.attn.b_k);
    out.emplace_back(p + "attn.W_v", b.attn.w_v);
    out.emplace_back(p + "attn.b_v", b.attn.b_v);
    out.emplace_back(p + "attn.W_o", b.attn.w_o);
    out.emplace_back(p + "attn.b_o", b.attn.b_o);
    out.emplace_back(p + "ln2.gamma", b.ln2.gamma);
    out.emplace_back(p + "ln2.beta", b.ln2.beta);
    if (const auto* dense = std::get_if<DenseFFN>(&b.ffn)) {
      out.emplace_back(p + "ffn.W_in", dense->w_in);
      out.emplace_back(p + "ffn.b_in", dense->b_in);
      out.emplace_back(p + "ffn.W_out", dense->w_out);
      out.emplace_back(p + "ffn.b_out", dense->b_out);
    } else {
      const auto& moe = std::get<MoELayer>(b.ffn);
      auto expert = [&](const std::string& name, const DenseFFN& f) {
        out.emplace_back(p + name + ".W_in", f.w_in);
        out.emplace_back(p + name + ".b_in", f.b_in);
        out.emplace_back(p + name + ".W_out", f.w_out);
        out.emplace_back(p + name + ".b_out", f.b_out);
      };
      expert("expert0", moe.shared);
      for (size_t e = 0; e < moe.normal.size(); ++e)
        expert("expert" + std::to_string(e + 1), moe.normal[e]);
      out.emplace_back(p + "router", moe.router.logits);
    }
  }
  out.emplace_back("final_norm.gamma", m.final_norm.gamma);
  out.emplace_back("final_norm.beta", m.final_norm.beta);
  out.emplace_back("head.W", m.head_w);
  out.emplace_back("head.b", m.head_b);
  return out;
}

inline std::vector<Tensor> all_params(const RewardModel& m) {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params(m)) out.push_back(t);
  return out;
}

inline size_t param_count(const RewardModel& m) {
  size_t n = 0;
  for (const Tensor& t : all_params(m)) n += t.size();
  return n;
}

inline void set_trainable(const RewardModel& m, bool on) {
  for (Tensor& t : all_params(m)) t.set_requires_grad(on);
}

inline RewardModel clone_model(const RewardModel& m) {
  RewardModel c;
  c.cfg = m.cfg;
  c.head_kind = m.head_kind;
  c.tok_emb = m.tok_emb.clone();
  c.pos_emb = m.pos_emb.clone();
  for (const Block& b : m.blocks) {
    Block nb;
    nb.ln1 = {b.ln1.gamma.clone(), b.ln1.beta.clone()};
    nb.attn = {b.attn.w_q.clone(), b.attn.b_q.clone(), b.attn.w_k.clone(), b.attn.b_k.clone(),
               b.attn.w_v.clone(), b.attn.b_v.clone(), b.attn.w_o.clone(), b.attn.b_o.clone()};
    nb.ln2 = {b.ln2.gamma.clone(), b.ln2.beta.clone()};
    if (const auto* dense = std::get_if<DenseFFN>(&b.ffn)) {
      nb.ffn = detail::clone_ffn(*dense);
    } else {
      const auto& moe = std::get<MoELayer>(b.ffn);
      MoELayer nm;
      nm.shared = detail::clone_ffn(moe.shared);
      for (const DenseFFN& e : moe.normal) nm.normal.push_back(detail::clone_ffn(e));
      nm.router = {moe.router.logits.clone()};
      nm.active_k = moe.active_k;
      nb.ffn = std::move(nm);
    }
    c.blocks.push_back(std::move(nb));
  }
  c.final_norm = {m.final_norm.gamma.clone(), m.final_norm.beta.clone()};
  c.head_w = m.head_w.clone();
  c.head_b = m.head_b.clone();
  return c;
}

// Backbone-preserving head swap: reward-model fine-tuning usually starts from
// an SFT checkpoint. The fresh reward head is zero, so the cold BT loss is ln 2.
inline RewardModel to_reward_model(const RewardModel& lm) {
  RewardModel m = clone_model(lm);
  m.head_kind = HeadKind::reward;
  m.head_w = Tensor::zeros({m.cfg.d_model, 1}, true);
  m.head_b = Tensor::zeros({1}, true);
  return m;
}

// Identity over all parameter bytes; used for merge provenance.
inline uint64_t model_hash(const RewardModel& m) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (auto& [name, t] : named_params(m)) {
    h = fnv1a64(name, h);
    h = content_hash(t, h);
  }
  return h;
}

}  // namespace umrm
