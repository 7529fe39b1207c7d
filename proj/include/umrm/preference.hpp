#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "umrm/adam.hpp"
#include "umrm/forward.hpp"
#include "umrm/io.hpp"
#include "umrm/model.hpp"
#include "umrm/rng.hpp"

namespace umrm {

struct PreferencePair {
  std::vector<int> prompt;
  std::vector<int> chosen;
  std::vector<int> rejected;
  double gold_margin = 0.0;  // gold(chosen) - gold(rejected), audit only
};

using PreferenceDataset = std::vector<PreferencePair>;

// Exactly computable stand-in for the gold reward model: a fixed bag of
// weighted token bigrams plus a target-length penalty. Cheap, deterministic,
// and impossible for a trained proxy to match perfectly from noisy pairs.
struct SyntheticGold {
  uint64_t seed = 0;
  std::map<std::pair<int, int>, double> bigram_weights;
  size_t length_target = 12;  // L*
  double length_penalty_scale = 1.0;
};

inline SyntheticGold make_synthetic_gold(uint64_t seed, size_t vocab_size, size_t n_bigrams,
                                         double weight_scale, size_t length_target,
                                         double length_penalty_scale) {
  SyntheticGold gold;
  gold.seed = seed;
  gold.length_target = length_target;
  gold.length_penalty_scale = length_penalty_scale;
  Rng rng(substream(seed, "gold"));
  const int content = static_cast<int>(vocab_size) - kFirstContentToken;
  if (content < 2) throw ConfigError("synthetic gold: vocabulary too small");
  while (gold.bigram_weights.size() < n_bigrams) {
    int a = kFirstContentToken + static_cast<int>(rng.randint(0, content - 1));
    int b = kFirstContentToken + static_cast<int>(rng.randint(0, content - 1));
    gold.bigram_weights[{a, b}] = rng.normal(0.0, weight_scale);
  }
  return gold;
}

inline double gold_reward(const SyntheticGold& gold, std::span<const int> prompt,
                          std::span<const int> response) {
  if (prompt.empty() || response.empty()) throw ConfigError("gold_reward: empty sequence");
  double acc = 0.0;
  for (size_t i = 0; i + 1 < response.size(); ++i) {
    auto it = gold.bigram_weights.find({response[i], response[i + 1]});
    if (it != gold.bigram_weights.end()) acc += it->second;
  }
  const double len = static_cast<double>(response.size());
  const double target = static_cast<double>(gold.length_target);
  return acc / len - gold.length_penalty_scale * std::abs(len - target) / target;
}

inline nlohmann::json gold_to_json(const SyntheticGold& g) {
  nlohmann::json weights = nlohmann::json::array();
  for (const auto& [bigram, w] : g.bigram_weights)
    weights.push_back({bigram.first, bigram.second, w});
  return {{"seed", g.seed},
          {"length_target", g.length_target},
          {"length_penalty_scale", g.length_penalty_scale},
          {"bigram_weights", weights}};
}

inline SyntheticGold gold_from_json(const nlohmann::json& j) {
  SyntheticGold g;
  g.seed = j.at("seed").get<uint64_t>();
  g.length_target = j.at("length_target").get<size_t>();
  g.length_penalty_scale = j.at("length_penalty_scale").get<double>();
  for (const auto& entry : j.at("bigram_weights"))
    g.bigram_weights[{entry[0].get<int>(), entry[1].get<int>()}] = entry[2].get<double>();
  return g;
}

struct GenConfig {
  size_t n_prompts = 256;
  size_t prompt_len_min = 4, prompt_len_max = 8;
  size_t response_len_min = 6, response_len_max = 20;
  size_t pairs_per_prompt = 1;
  double label_temperature = 1.0;  // tau; 0 labels by gold argmax
  uint64_t seed = 0;

  void validate(size_t max_seq) const {
    if (n_prompts == 0 || pairs_per_prompt == 0) throw ConfigError("gen: zero count");
    if (prompt_len_min < 1 || prompt_len_min > prompt_len_max ||
        response_len_min < 2 || response_len_min > response_len_max)
      throw ConfigError("gen: bad length range");
    if (prompt_len_max + response_len_max + 1 > max_seq)
      throw ConfigError("gen: lengths exceed max_seq budget");
    if (label_temperature < 0.0) throw ConfigError("gen: negative label temperature");
  }
};

// Response source for pair generation: the SFT policy when available,
// otherwise uniform random content tokens.
using ResponseSampler = std::function<std::vector<int>(std::span<const int> prompt, Rng&)>;

inline ResponseSampler uniform_sampler(const GenConfig& cfg, size_t vocab_size) {
  return [cfg, vocab_size](std::span<const int>, Rng& rng) {
    size_t len = static_cast<size_t>(
        rng.randint(static_cast<int64_t>(cfg.response_len_min),
                    static_cast<int64_t>(cfg.response_len_max)));
    std::vector<int> out(len);
    for (int& t : out)
      t = kFirstContentToken +
          static_cast<int>(rng.randint(0, static_cast<int64_t>(vocab_size) - 1 - kFirstContentToken));
    return out;
  };
}

inline ResponseSampler policy_sampler(const RewardModel& policy, double temperature,
                                      size_t max_new_tokens) {
  return [&policy, temperature, max_new_tokens](std::span<const int> prompt, Rng& rng) {
    return sample_response(policy, prompt, max_new_tokens, temperature, rng).tokens;
  };
}

// Bigram Markov chain tilted toward the gold bigram weights, with lengths
// concentrated near the gold length target. Gives SFT corpora and response
// pools enough structure for reward signals to be learnable.
inline ResponseSampler markov_sampler(const SyntheticGold& gold, const GenConfig& cfg,
                                      size_t vocab_size, double sharpness) {
  const int content_lo = kFirstContentToken;
  const int content_n = static_cast<int>(vocab_size) - kFirstContentToken;
  return [gold, cfg, content_lo, content_n, sharpness](std::span<const int>, Rng& rng) {
    const double target = static_cast<double>(gold.length_target);
    long len = std::lround(target + rng.normal(0.0, 2.0));
    len = std::max<long>(static_cast<long>(cfg.response_len_min),
                         std::min<long>(static_cast<long>(cfg.response_len_max), len));
    std::vector<int> out;
    out.reserve(static_cast<size_t>(len));
    int cur = content_lo + static_cast<int>(rng.randint(0, content_n - 1));
    out.push_back(cur);
    std::vector<double> weights(static_cast<size_t>(content_n));
    while (out.size() < static_cast<size_t>(len)) {
      for (int j = 0; j < content_n; ++j) {
        auto it = gold.bigram_weights.find({cur, content_lo + j});
        const double w = it == gold.bigram_weights.end() ? 0.0 : it->second;
        weights[static_cast<size_t>(j)] = std::exp(sharpness * w);
      }
      cur = content_lo + static_cast<int>(rng.categorical(weights));
      out.push_back(cur);
    }
    return out;
  };
}

inline std::vector<int> random_prompt(const GenConfig& cfg, size_t vocab_size, Rng& rng) {
  size_t len = static_cast<size_t>(rng.randint(static_cast<int64_t>(cfg.prompt_len_min),
                                               static_cast<int64_t>(cfg.prompt_len_max)));
  std::vector<int> out(len);
  for (int& t : out)
    t = kFirstContentToken +
        static_cast<int>(rng.randint(0, static_cast<int64_t>(vocab_size) - 1 - kFirstContentToken));
  return out;
}

// Pairwise data with Bradley-Terry labeling noise: the better-gold response
// is chosen with probability sigmoid(margin / tau); tau = 0 labels
// deterministically. Per-prompt substreams keep sharding reorder-safe.
inline PreferenceDataset generate_preferences(const SyntheticGold& gold,
                                              const ResponseSampler& sampler,
                                              const GenConfig& cfg, size_t vocab_size) {
  PreferenceDataset data;
  for (size_t pi = 0; pi < cfg.n_prompts; ++pi) {
    Rng rng(substream(cfg.seed, "gen", pi));
    std::vector<int> prompt = random_prompt(cfg, vocab_size, rng);
    for (size_t k = 0; k < cfg.pairs_per_prompt; ++k) {
      std::vector<int> a, b;
      bool ok = false;
      for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
        a = sampler(prompt, rng);
        b = sampler(prompt, rng);
        ok = !a.empty() && !b.empty() && a != b;
        if (ok && cfg.label_temperature == 0.0)
          ok = gold_reward(gold, prompt, a) != gold_reward(gold, prompt, b);
      }
      if (!ok) continue;  // degenerate prompt; skip the pair
      const double ra = gold_reward(gold, prompt, a);
      const double rb = gold_reward(gold, prompt, b);
      bool a_chosen;
      if (cfg.label_temperature == 0.0) {
        a_chosen = ra > rb;
      } else {
        const double p = 1.0 / (1.0 + std::exp(-(ra - rb) / cfg.label_temperature));
        a_chosen = rng.uniform() < p;
      }
      PreferencePair pair;
      pair.prompt = prompt;
      pair.chosen = a_chosen ? a : b;
      pair.rejected = a_chosen ? b : a;
      pair.gold_margin = a_chosen ? ra - rb : rb - ra;
      data.push_back(std::move(pair));
    }
  }
  return data;
}

// ---- preference JSONL (one object per line, LF) --------------------------

inline std::string preferences_to_jsonl(const PreferenceDataset& data) {
  std::string out;
  for (const PreferencePair& p : data) {
    nlohmann::json j = {{"prompt", p.prompt},
                        {"chosen", p.chosen},
                        {"rejected", p.rejected},
                        {"gold_margin", p.gold_margin}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline PreferenceDataset preferences_from_jsonl(const std::string& text) {
  PreferenceDataset data;
  for (const std::string& line : split_lines(text)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    PreferencePair p;
    p.prompt = j.at("prompt").get<std::vector<int>>();
    p.chosen = j.at("chosen").get<std::vector<int>>();
    p.rejected = j.at("rejected").get<std::vector<int>>();
    p.gold_margin = j.at("gold_margin").get<double>();
    data.push_back(std::move(p));
  }
  return data;
}

inline void save_preferences(const std::string& path, const PreferenceDataset& data) {
  write_file_atomic(path, preferences_to_jsonl(data));
}

inline PreferenceDataset load_preferences(const std::string& path) {
  return preferences_from_jsonl(read_text_file(path));
}

// ---- token-sequence corpus JSONL ------------------------------------------

inline std::string corpus_to_jsonl(const std::vector<std::vector<int>>& corpus) {
  std::string out;
  for (const auto& seq : corpus) {
    out += nlohmann::json{{"tokens", seq}}.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<std::vector<int>> corpus_from_jsonl(const std::string& text) {
  std::vector<std::vector<int>> corpus;
  for (const std::string& line : split_lines(text)) {
    if (line.empty()) continue;
    corpus.push_back(nlohmann::json::parse(line).at("tokens").get<std::vector<int>>());
  }
  return corpus;
}

// ---- training -------------------------------------------------------------

// Next-token cross-entropy over full sequences. Loss is recorded before each
// update, so losses[0] is the cold-start value.
inline std::vector<double> sft_train(RewardModel& policy,
                                     const std::vector<std::vector<int>>& corpus, size_t steps,
                                     double lr, size_t batch_size, uint64_t seed) {
  if (policy.head_kind != HeadKind::lm) throw ConfigError("sft_train: model has no lm head");
  if (corpus.empty()) throw ConfigError("sft_train: empty corpus");
  AdamConfig acfg;
  acfg.lr = lr;
  Adam opt(all_params(policy), acfg);
  std::vector<double> losses;
  losses.reserve(steps);
  for (size_t step = 0; step < steps; ++step) {
    Rng rng(substream(seed, "sft", step));
    opt.zero_grad();
    Graph g;
    std::vector<Tensor> per_seq;
    for (size_t b = 0; b < batch_size; ++b) {
      const auto& seq = corpus[static_cast<size_t>(
          rng.randint(0, static_cast<int64_t>(corpus.size()) - 1))];
      per_seq.push_back(g.mean(g.scale(lm_log_probs(g, policy, seq), -1.0)));
    }
    Tensor loss = g.mean(g.concat_cols(per_seq));
    if (!std::isfinite(loss.value())) throw NumericError("sft_train: non-finite loss");
    losses.push_back(loss.value());
    g.backward(loss);
    opt.step();
  }
  return losses;
}

// Bradley-Terry loss of a pair batch:
//   -log sigmoid(margin) == cross-entropy of the logit row [margin, 0] at 0.
inline Tensor bt_loss(Graph& g, const RewardModel& rm, const PreferenceDataset& prefs,
                      std::span<const size_t> indices) {
  std::vector<Tensor> rows;
  rows.reserve(indices.size());
  for (size_t idx : indices) {
    const PreferencePair& p = prefs[idx];
    Tensor margin = g.add(reward_score(g, rm, p.prompt, p.chosen),
                          g.scale(reward_score(g, rm, p.prompt, p.rejected), -1.0));
    rows.push_back(g.concat_cols({margin, Tensor::zeros({1, 1})}));
  }
  Tensor margins = g.concat_rows(rows);
  return g.mean(g.cross_entropy(margins, std::vector<int>(indices.size(), 0)));
}

// Minibatch BT training; architecture-agnostic (dense, MoE or merged models).
inline std::vector<double> bt_train(RewardModel& rm, const PreferenceDataset& prefs, size_t steps,
                                    size_t batch_size, double lr, uint64_t seed) {
  if (rm.head_kind != HeadKind::reward) throw ConfigError("bt_train: model has no reward head");
  if (prefs.empty()) throw ConfigError("bt_train: empty dataset");
  AdamConfig acfg;
  acfg.lr = lr;
  Adam opt(all_params(rm), acfg);
  std::vector<double> losses;
  losses.reserve(steps);
  batch_size = std::min(batch_size, prefs.size());
  for (size_t step = 0; step < steps; ++step) {
    Rng rng(substream(seed, "bt", step));
    std::vector<size_t> indices(batch_size);
    for (size_t& i : indices)
      i = static_cast<size_t>(rng.randint(0, static_cast<int64_t>(prefs.size()) - 1));
    opt.zero_grad();
    Graph g;
    Tensor loss = bt_loss(g, rm, prefs, indices);
    if (!std::isfinite(loss.value())) throw NumericError("bt_train: non-finite loss");
    losses.push_back(loss.value());
    g.backward(loss);
    opt.step();
  }
  return losses;
}

// Fraction of pairs ranked correctly; exact ties count as incorrect.
inline double eval_accuracy(const std::function<double(std::span<const int>, std::span<const int>)>& score,
                            const PreferenceDataset& prefs) {
  if (prefs.empty()) throw ConfigError("eval_accuracy: empty dataset");
  size_t wins = 0;
  for (const PreferencePair& p : prefs)
    if (score(p.prompt, p.chosen) > score(p.prompt, p.rejected)) ++wins;
  return static_cast<double>(wins) / static_cast<double>(prefs.size());
}

inline double eval_accuracy(const RewardModel& rm, const PreferenceDataset& prefs) {
  return eval_accuracy(
      [&rm](std::span<const int> prompt, std::span<const int> response) {
        return reward_score_value(rm, prompt, response);
      },
      prefs);
}

}  // namespace umrm
