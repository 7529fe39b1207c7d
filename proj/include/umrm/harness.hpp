#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "umrm/adam.hpp"
#include "umrm/forward.hpp"
#include "umrm/parallel.hpp"
#include "umrm/io.hpp"
#include "umrm/model.hpp"
#include "umrm/preference.hpp"
#include "umrm/rng.hpp"

namespace umrm {

using ScoreFn = std::function<double(std::span<const int>, std::span<const int>)>;

inline ScoreFn model_score_fn(const RewardModel& rm) {
  return [&rm](std::span<const int> prompt, std::span<const int> response) {
    return reward_score_value(rm, prompt, response);
  };
}

// ---- Best-of-N -------------------------------------------------------------

struct BoNConfig {
  std::vector<size_t> n_values = {2, 4, 8, 16, 32, 64, 128};
  double temperature = 1.0;
  size_t max_response_len = 16;
  uint64_t seed = 0;
  bool nested = true;  // shared sample prefixes across N (exact monotonicity)

  void validate() const {
    if (n_values.empty()) throw ConfigError("bon: empty N set");
    for (size_t i = 0; i < n_values.size(); ++i) {
      if (n_values[i] < 1) throw ConfigError("bon: N must be >= 1");
      if (i > 0 && n_values[i] <= n_values[i - 1])
        throw ConfigError("bon: N values must be strictly increasing");
    }
  }
};

struct BestOfNResult {
  std::vector<int> response;
  std::vector<double> scores;
  size_t pick_index = 0;
};

// Draw N i.i.d. samples, keep the proxy argmax; ties go to the earliest
// sample. Per-index substreams make sample i identical for every N >= i,
// so larger-N candidate sets nest.
inline BestOfNResult best_of_n(const RewardModel& policy, const ScoreFn& score,
                               std::span<const int> prompt, size_t n, double temperature,
                               size_t max_response_len, uint64_t seed) {
  if (n < 1) throw ConfigError("best_of_n: N must be >= 1");
  BestOfNResult result;
  double best = 0.0;
  for (size_t i = 0; i < n; ++i) {
    Rng rng(substream(seed, "bon-sample", i));
    std::vector<int> resp = sample_response(policy, prompt, max_response_len, temperature, rng).tokens;
    if (resp.empty()) resp.push_back(kEos);  // immediate-EOS sample; score the empty reply
    const double s = score(prompt, resp);
    result.scores.push_back(s);
    if (i == 0 || s > best) {
      best = s;
      result.pick_index = i;
      result.response = std::move(resp);
    }
  }
  return result;
}

struct BonRow {
  size_t n = 0;
  double mean_proxy = 0.0;
  double mean_gold = 0.0;
  double win_rate = 0.0;
};

// Score scale context for cross-model comparisons: moments of proxy and gold
// over every sampled candidate.
struct BonPoolStats {
  double proxy_mean = 0.0, proxy_std = 0.0;
  double gold_mean = 0.0, gold_std = 0.0;
  size_t n_samples = 0;
};

struct BonSweepResult {
  std::vector<BonRow> rows;
  BonPoolStats pool;
};

// Per-N table over a prompt set. Win rate compares the gold value of the BoN
// pick against the prompt's first sample; ties count one half. Prompts shard
// across UMRM_THREADS with per-prompt substreams, so the result is identical
// to a sequential run.
inline BonSweepResult bon_sweep(const RewardModel& policy, const ScoreFn& score,
                                const SyntheticGold& gold,
                                const std::vector<std::vector<int>>& prompts,
                                const BoNConfig& cfg) {
  cfg.validate();
  if (prompts.empty()) throw ConfigError("bon_sweep: no prompts");
  const size_t max_n = cfg.n_values.back();

  BonSweepResult out;
  out.rows.resize(cfg.n_values.size());
  for (size_t i = 0; i < cfg.n_values.size(); ++i) out.rows[i].n = cfg.n_values[i];

  std::vector<std::vector<double>> proxy_all(prompts.size()), gold_all(prompts.size());
  parallel_for(prompts.size(), [&](size_t pi) {
    const std::vector<int>& prompt = prompts[pi];
    proxy_all[pi].reserve(max_n);
    gold_all[pi].reserve(max_n);
    for (size_t i = 0; i < max_n; ++i) {
      uint64_t s = cfg.nested ? substream(cfg.seed, "bon", pi, i)
                              : substream(cfg.seed, "bon-indep", pi, i);
      Rng rng(s);
      std::vector<int> resp =
          sample_response(policy, prompt, cfg.max_response_len, cfg.temperature, rng).tokens;
      if (resp.empty()) resp.push_back(kEos);
      proxy_all[pi].push_back(score(prompt, resp));
      gold_all[pi].push_back(gold_reward(gold, prompt, resp));
    }
  });

  double pool_p = 0.0, pool_p2 = 0.0, pool_g = 0.0, pool_g2 = 0.0;
  size_t pool_n = 0;
  for (size_t pi = 0; pi < prompts.size(); ++pi) {
    const std::vector<double>& proxy = proxy_all[pi];
    const std::vector<double>& gold_v = gold_all[pi];
    for (size_t i = 0; i < max_n; ++i) {
      pool_p += proxy[i];
      pool_p2 += proxy[i] * proxy[i];
      pool_g += gold_v[i];
      pool_g2 += gold_v[i] * gold_v[i];
      ++pool_n;
    }
    for (size_t ni = 0; ni < cfg.n_values.size(); ++ni) {
      const size_t n = cfg.n_values[ni];
      size_t pick = 0;
      for (size_t i = 1; i < n; ++i)
        if (proxy[i] > proxy[pick]) pick = i;
      out.rows[ni].mean_proxy += proxy[pick];
      out.rows[ni].mean_gold += gold_v[pick];
      if (gold_v[pick] > gold_v[0])
        out.rows[ni].win_rate += 1.0;
      else if (gold_v[pick] == gold_v[0])
        out.rows[ni].win_rate += 0.5;
    }
  }
  const double inv = 1.0 / static_cast<double>(prompts.size());
  for (BonRow& r : out.rows) {
    r.mean_proxy *= inv;
    r.mean_gold *= inv;
    r.win_rate *= inv;
  }
  const double n = static_cast<double>(pool_n);
  out.pool.n_samples = pool_n;
  out.pool.proxy_mean = pool_p / n;
  out.pool.proxy_std = std::sqrt(std::max(0.0, pool_p2 / n - out.pool.proxy_mean * out.pool.proxy_mean));
  out.pool.gold_mean = pool_g / n;
  out.pool.gold_std = std::sqrt(std::max(0.0, pool_g2 / n - out.pool.gold_mean * out.pool.gold_mean));
  return out;
}

// ---- KL-shaped PPO ----------------------------------------------------------

// R_ppo = r - beta * (log pi_policy - log pi_init)
inline double shaped_reward(double r, double logp_policy, double logp_init, double beta) {
  return r - beta * (logp_policy - logp_init);
}

// Single-sample KL estimate: sum over response positions of the realized
// log-prob gap. Per-sample values may be slightly negative; the batch mean
// is what gets logged.
inline double sequence_kl(const RewardModel& policy, const RewardModel& init,
                          std::span<const int> prompt, std::span<const int> response) {
  if (policy.head_kind != HeadKind::lm || init.head_kind != HeadKind::lm)
    throw ConfigError("sequence_kl: both models must be lm-headed");
  if (policy.cfg.vocab_size != init.cfg.vocab_size) throw ConfigError("sequence_kl: vocab mismatch");
  std::vector<int> seq;
  seq.push_back(kBos);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end());
  const size_t from = 1 + prompt.size();
  Graph g(/*recording=*/false);
  return span_log_prob(g, policy, seq, from, seq.size()).value() -
         span_log_prob(g, init, seq, from, seq.size()).value();
}

struct PPOConfig {
  size_t steps = 300;
  double lr = 1e-4;
  uint64_t seed = 22;
  double beta = 0.05;          // KL coefficient
  double clip_eps = 0.2;       // surrogate ratio clip
  size_t prompts_per_step = 4;
  size_t samples_per_prompt = 4;
  double kl_abort_threshold = 150.0;
  size_t max_response_len = 16;
  double sample_temperature = 1.0;

  // steps = 0 is a valid no-op for ppo_run itself; the CLI stage schema
  // additionally requires steps >= 1.
  void validate() const {
    if (beta < 0.0) throw ConfigError("ppo: beta must be >= 0");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("ppo: clip must be in (0,1)");
    if (prompts_per_step == 0 || samples_per_prompt == 0) throw ConfigError("ppo: zero batch");
  }
};

struct TrajectoryRecord {
  size_t step = 0;
  double proxy_reward = 0.0;
  double gold_reward = 0.0;
  double kl = 0.0;
  double policy_loss = 0.0;
};

using TrajectoryLog = std::vector<TrajectoryRecord>;

struct PPOResult {
  TrajectoryLog log;
  bool aborted = false;   // KL passed kl_abort_threshold (an outcome, not a failure)
  size_t abort_step = 0;
};

// Bandit-style PPO: sample a response batch, shape rewards with the Eq-3 KL
// penalty, whiten them into advantages (no value network), and take one
// clipped-surrogate step. With one update per batch the sampling policy is
// the old policy, so the surrogate gradient is coeff * grad(log pi) with
// coeff = gate * ratio * advantage evaluated numerically.
//
// Gold scores are logged for trajectory analysis only; no gradient ever
// flows from them.
inline PPOResult ppo_run(RewardModel& policy, const ScoreFn& score, const SyntheticGold& gold,
                         const std::vector<std::vector<int>>& prompts, const PPOConfig& cfg) {
  cfg.validate();
  if (policy.head_kind != HeadKind::lm) throw ConfigError("ppo_run: policy must be lm-headed");
  if (prompts.empty()) throw ConfigError("ppo_run: no prompts");

  RewardModel init = clone_model(policy);
  set_trainable(init, false);

  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam opt(all_params(policy), acfg);

  PPOResult result;
  for (size_t step = 0; step < cfg.steps; ++step) {
    struct Sample {
      std::vector<int> seq;  // BOS + prompt + response (+EOS)
      size_t from = 0;       // first action position
      double proxy = 0.0, gold_v = 0.0, kl = 0.0, logp_old = 0.0;
    };
    std::vector<Sample> batch;

    Rng prompt_rng(substream(cfg.seed, "ppo-prompt", step));
    for (size_t j = 0; j < cfg.prompts_per_step; ++j) {
      const auto& prompt = prompts[static_cast<size_t>(
          prompt_rng.randint(0, static_cast<int64_t>(prompts.size()) - 1))];
      for (size_t k = 0; k < cfg.samples_per_prompt; ++k) {
        Rng rng(substream(cfg.seed, "ppo-sample", step, j * cfg.samples_per_prompt + k));
        SampledResponse sr =
            sample_response(policy, prompt, cfg.max_response_len, cfg.sample_temperature, rng);
        if (sr.tokens.empty() && !sr.hit_eos) continue;

        Sample s;
        s.seq.push_back(kBos);
        s.seq.insert(s.seq.end(), prompt.begin(), prompt.end());
        s.seq.insert(s.seq.end(), sr.tokens.begin(), sr.tokens.end());
        if (sr.hit_eos) s.seq.push_back(kEos);
        s.from = 1 + prompt.size();

        std::vector<int> resp = sr.tokens.empty() ? std::vector<int>{kEos} : sr.tokens;
        s.proxy = score(prompt, resp);
        s.gold_v = gold_reward(gold, prompt, resp);
        Graph vg(/*recording=*/false);
        s.logp_old = span_log_prob(vg, policy, s.seq, s.from, s.seq.size()).value();
        s.kl = s.logp_old - span_log_prob(vg, init, s.seq, s.from, s.seq.size()).value();
        batch.push_back(std::move(s));
      }
    }
    if (batch.empty()) continue;

    const double bn = static_cast<double>(batch.size());
    double proxy_mean = 0.0, gold_mean = 0.0, kl_mean = 0.0;
    std::vector<double> shaped(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
      shaped[i] = shaped_reward(batch[i].proxy, batch[i].logp_old, batch[i].logp_old - batch[i].kl,
                                cfg.beta);
      proxy_mean += batch[i].proxy;
      gold_mean += batch[i].gold_v;
      kl_mean += batch[i].kl;
    }
    proxy_mean /= bn;
    gold_mean /= bn;
    kl_mean /= bn;

    // batch-whitened advantages
    double s_mean = 0.0, s_var = 0.0;
    for (double s : shaped) s_mean += s;
    s_mean /= bn;
    for (double s : shaped) s_var += (s - s_mean) * (s - s_mean);
    s_var /= bn;
    const double s_std = std::sqrt(s_var);
    std::vector<double> adv(batch.size(), 0.0);
    if (s_std > 1e-12)
      for (size_t i = 0; i < batch.size(); ++i) adv[i] = (shaped[i] - s_mean) / s_std;

    opt.zero_grad();
    Graph g;
    std::vector<Tensor> terms;
    terms.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
      Tensor logp = span_log_prob(g, policy, batch[i].seq, batch[i].from, batch[i].seq.size());
      const double ratio = std::exp(logp.value() - batch[i].logp_old);
      const bool gated = (adv[i] > 0.0 && ratio > 1.0 + cfg.clip_eps) ||
                         (adv[i] < 0.0 && ratio < 1.0 - cfg.clip_eps);
      const double coeff = gated ? 0.0 : ratio * adv[i];
      terms.push_back(g.mul(logp, Tensor::scalar(-coeff / bn)));
    }
    Tensor loss = g.sum(g.concat_cols(terms));
    if (!std::isfinite(loss.value())) throw NumericError("ppo_run: non-finite loss");

    result.log.push_back({step, proxy_mean, gold_mean, kl_mean, loss.value()});
    if (kl_mean > cfg.kl_abort_threshold) {
      result.aborted = true;
      result.abort_step = step;
      break;
    }
    g.backward(loss);
    opt.step();
  }
  return result;
}

// ---- divergence detection ---------------------------------------------------

struct DivergenceConfig {
  size_t window = 10;                 // trailing-mean width
  double margin = -1.0;               // delta; < 0 means 0.02 * smoothed-gold range
  size_t patience = 20;               // required post-peak confirmations
};

inline std::vector<double> trailing_mean(std::span<const double> x, size_t w) {
  std::vector<double> out(x.size());
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    acc += x[i];
    if (i >= w) acc -= x[i - w];
    out[i] = acc / static_cast<double>(std::min(i + 1, w));
  }
  return out;
}

// Onset of reward hacking: the smoothed gold trajectory peaks and then stays
// at least `margin` below the peak for `patience` steps while the smoothed
// proxy at those steps sits above its value at the peak. Both trajectories
// declining together is an optimizer failure, not hacking, and returns none.
inline std::optional<size_t> divergence_point(const TrajectoryLog& log,
                                              const DivergenceConfig& cfg = {}) {
  if (log.empty()) throw ConfigError("divergence_point: empty log");
  if (cfg.window < 1 || cfg.patience < 1) throw ConfigError("divergence_point: bad config");
  std::vector<double> gold(log.size()), proxy(log.size());
  for (size_t i = 0; i < log.size(); ++i) {
    gold[i] = log[i].gold_reward;
    proxy[i] = log[i].proxy_reward;
  }
  std::vector<double> sg = trailing_mean(gold, cfg.window);
  std::vector<double> sp = trailing_mean(proxy, cfg.window);

  double margin = cfg.margin;
  if (margin < 0.0) {
    double lo = sg[0], hi = sg[0];
    for (double v : sg) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    margin = 0.02 * (hi - lo);
  }

  size_t peak = 0;
  for (size_t i = 1; i < sg.size(); ++i)
    if (sg[i] > sg[peak]) peak = i;

  size_t confirmations = 0;
  for (size_t i = peak + 1; i < sg.size(); ++i)
    if (sg[i] <= sg[peak] - margin && sp[i] > sp[peak]) ++confirmations;
  if (confirmations >= cfg.patience) return log[peak].step;
  return std::nullopt;
}

// ---- CSV contracts ----------------------------------------------------------

inline std::string trajectory_to_csv(const TrajectoryLog& log) {
  std::string out = "step,proxy_reward,gold_reward,kl,policy_loss\n";
  for (const TrajectoryRecord& r : log) {
    out += std::to_string(r.step) + "," + fmt_g6(r.proxy_reward) + "," + fmt_g6(r.gold_reward) +
           "," + fmt_g6(r.kl) + "," + fmt_g6(r.policy_loss) + "\n";
  }
  return out;
}

inline TrajectoryLog trajectory_from_csv(const std::string& text) {
  std::vector<std::string> lines = split_lines(text);
  if (lines.empty() || lines[0] != "step,proxy_reward,gold_reward,kl,policy_loss")
    throw IoError("trajectory csv: missing or wrong header");
  TrajectoryLog log;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> c = split_csv_row(lines[i]);
    if (c.size() != 5) throw IoError("trajectory csv: wrong column count");
    log.push_back({static_cast<size_t>(std::stoull(c[0])), std::stod(c[1]), std::stod(c[2]),
                   std::stod(c[3]), std::stod(c[4])});
  }
  return log;
}

inline std::string bon_to_csv(const std::vector<BonRow>& rows) {
  std::string out = "n,mean_proxy,mean_gold,win_rate\n";
  for (const BonRow& r : rows)
    out += std::to_string(r.n) + "," + fmt_g6(r.mean_proxy) + "," + fmt_g6(r.mean_gold) + "," +
           fmt_g6(r.win_rate) + "\n";
  return out;
}

inline std::vector<BonRow> bon_from_csv(const std::string& text) {
  std::vector<std::string> lines = split_lines(text);
  if (lines.empty() || lines[0] != "n,mean_proxy,mean_gold,win_rate")
    throw IoError("bon csv: missing or wrong header");
  std::vector<BonRow> rows;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> c = split_csv_row(lines[i]);
    if (c.size() != 4) throw IoError("bon csv: wrong column count");
    rows.push_back({static_cast<size_t>(std::stoull(c[0])), std::stod(c[1]), std::stod(c[2]),
                    std::stod(c[3])});
  }
  return rows;
}

}  // namespace umrm
