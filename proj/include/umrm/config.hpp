#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umrm/common.hpp"
#include "umrm/io.hpp"

namespace umrm {

using Json = nlohmann::json;

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {
      "gen-data", "sft",  "train-rm", "upcycle",  "train-moe", "merge",
      "train-ensemble",  "bon", "ppo",      "eval-acc", "report"};
  return names;
}

// Full default config per stage. The defaults double as the schema: any user
// key that does not exist here is rejected, so typos never pass silently.
inline Json default_stage_config(const std::string& stage) {
  Json model = {{"vocab_size", 35}, {"d_model", 32}, {"n_layers", 2}, {"n_heads", 4},
                {"d_ff", 128},      {"max_seq", 32}, {"seed", 0}};
  Json base = {{"stage", stage}, {"seed", nullptr}, {"out", "runs/" + stage}};

  if (stage == "gen-data") {
    base["model"] = {{"vocab_size", 35}, {"max_seq", 32}};
    base["gold"] = {{"n_bigrams", 48},
                    {"weight_scale", 1.0},
                    {"length_target", 12},
                    {"length_penalty_scale", 1.0}};
    base["gen"] = {{"n_prompts", 1000},    {"prompt_len_min", 4},    {"prompt_len_max", 6},
                   {"response_len_min", 6}, {"response_len_max", 16}, {"pairs_per_prompt", 2},
                   {"label_temperature", 1.0}};
    base["sampler"] = {{"kind", "markov"},  // markov | uniform | policy
                       {"policy_checkpoint", ""},
                       {"temperature", 1.0},
                       {"markov_sharpness", 0.6}};
    base["n_sft_sequences"] = 512;
    base["n_eval_prompts"] = 50;
    return base;
  }
  if (stage == "sft") {
    base["model"] = model;
    base["corpus"] = "";
    base["steps"] = 300;
    base["batch"] = 8;
    base["lr"] = 1e-3;
    return base;
  }
  if (stage == "train-rm" || stage == "train-moe") {
    base["model"] = model;
    base["init_checkpoint"] = "";  // train-moe requires it; train-rm may start fresh
    base["prefs"] = "";
    base["steps"] = 200;
    base["batch"] = 16;
    base["lr"] = 3e-4;
    return base;
  }
  if (stage == "upcycle") {
    base["checkpoint"] = "";
    base["n_normal_experts"] = 3;
    base["active_k"] = 2;
    base["noise_scale"] = 1e-3;
    return base;
  }
  if (stage == "merge") {
    base["checkpoint"] = "";
    base["prefs"] = "";
    base["lambda"] = 0.5;
    base["fit_steps"] = 50;
    base["fit_lr"] = 0.05;
    base["fit_batch"] = 32;
    return base;
  }
  if (stage == "train-ensemble") {
    base["model"] = model;
    base["prefs"] = "";
    base["n_members"] = 4;
    base["steps"] = 200;
    base["batch"] = 16;
    base["lr"] = 3e-4;
    base["mode"] = "mean";
    base["k_unc"] = 1.0;
    return base;
  }
  if (stage == "bon") {
    base["policy_checkpoint"] = "";
    base["rm"] = {{"checkpoint", ""}, {"ensemble", ""}};
    base["gold"] = "";
    base["prompts"] = "";
    base["n_values"] = Json::array({1, 2, 4, 8, 16, 32, 64, 128});
    base["temperature"] = 1.0;
    base["max_response_len"] = 16;
    base["nested"] = true;
    return base;
  }
  if (stage == "ppo") {
    base["policy_checkpoint"] = "";
    base["rm"] = {{"checkpoint", ""}, {"ensemble", ""}};
    base["gold"] = "";
    base["prompts"] = "";
    base["steps"] = 300;
    base["lr"] = 1e-4;
    base["beta"] = 0.05;
    base["clip_eps"] = 0.2;
    base["prompts_per_step"] = 4;
    base["samples_per_prompt"] = 4;
    base["kl_abort_threshold"] = 150.0;
    base["max_response_len"] = 16;
    base["sample_temperature"] = 1.0;
    return base;
  }
  if (stage == "eval-acc") {
    base["rm"] = {{"checkpoint", ""}, {"ensemble", ""}};
    base["prefs"] = "";
    return base;
  }
  if (stage == "report") {
    base["runs"] = Json::array();  // entries: {dir, label, expert_count}
    base["divergence"] = {{"window", 10}, {"margin", -1.0}, {"patience", 20}};
    return base;
  }
  throw ConfigError("unknown stage: " + stage);
}

namespace detail {

inline bool same_json_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return true;
  if (a.is_null() || b.is_null()) return true;
  return a.type() == b.type();
}

inline void merge_strict(Json& base, const Json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config: expected object at " + path);
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key_path = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key_path + "'");
    Json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_strict(slot, it.value(), key_path);
    } else {
      if (!same_json_kind(slot, it.value()))
        throw ConfigError("config: wrong type for '" + key_path + "'");
      slot = it.value();
    }
  }
}

}  // namespace detail

// Dotted-path override, e.g. "gen.n_prompts=500". Values parse as JSON when
// possible, otherwise as strings.
inline void apply_override(Json& config, const std::string& spec) {
  const size_t eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value: " + spec);
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::exception&) {
    value = raw;
  }

  Json* node = &config;
  size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    size_t dot = path.find('.', start);
    parts.push_back(path.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) throw ConfigError("override: unknown key '" + path + "'");
    node = &(*node)[parts[i]];
  }
  const std::string& leaf = parts.back();
  if (!node->contains(leaf)) throw ConfigError("override: unknown key '" + path + "'");
  if (!detail::same_json_kind((*node)[leaf], value))
    throw ConfigError("override: wrong type for '" + path + "'");
  (*node)[leaf] = value;
}

struct CliOptions {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

// Defaults <- config file <- CLI flags, validated strictly at each step.
inline Json resolve_config(const std::string& stage, const CliOptions& opts) {
  Json config = default_stage_config(stage);
  if (!opts.config_path.empty()) {
    Json user;
    try {
      user = Json::parse(read_text_file(opts.config_path));
    } catch (const Json::exception& e) {
      throw ConfigError("config: " + opts.config_path + " is not valid JSON: " + e.what());
    }
    if (user.contains("stage") && user["stage"] != stage)
      throw ConfigError("config: file is for stage '" + user["stage"].get<std::string>() +
                        "', not '" + stage + "'");
    detail::merge_strict(config, user, "");
  }
  for (const std::string& ov : opts.overrides) apply_override(config, ov);
  if (opts.seed) config["seed"] = *opts.seed;
  if (!opts.out.empty()) config["out"] = opts.out;
  if (!config["seed"].is_number_unsigned() && !config["seed"].is_number_integer())
    throw ConfigError("config: seed is mandatory (use --seed or the seed field)");
  return config;
}

inline uint64_t config_hash(const Json& config) { return fnv1a64(config.dump()); }

}  // namespace umrm
