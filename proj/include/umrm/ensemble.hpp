#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "umrm/forward.hpp"
#include "umrm/model.hpp"

namespace umrm {

enum class EnsembleMode { mean, worst_case, uncertainty_weighted };

inline const char* ensemble_mode_name(EnsembleMode m) {
  switch (m) {
    case EnsembleMode::mean: return "mean";
    case EnsembleMode::worst_case: return "worst_case";
    case EnsembleMode::uncertainty_weighted: return "uncertainty_weighted";
  }
  return "mean";
}

inline EnsembleMode ensemble_mode_from_name(const std::string& s) {
  if (s == "mean") return EnsembleMode::mean;
  if (s == "worst_case") return EnsembleMode::worst_case;
  if (s == "uncertainty_weighted") return EnsembleMode::uncertainty_weighted;
  throw ConfigError("unknown ensemble mode: " + s);
}

// Seed-diverse reward models aggregated per query. uncertainty_weighted is
// mean - k * population std, penalizing member disagreement.
struct EnsembleRM {
  std::vector<RewardModel> members;
  EnsembleMode mode = EnsembleMode::mean;
  double k_unc = 1.0;
};

inline double aggregate_scores(std::span<const double> scores, EnsembleMode mode, double k_unc) {
  if (scores.empty()) throw ConfigError("ensemble: no member scores");
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(scores.size());
  switch (mode) {
    case EnsembleMode::mean:
      return mean;
    case EnsembleMode::worst_case: {
      double worst = scores[0];
      for (double s : scores) worst = std::min(worst, s);
      return worst;
    }
    case EnsembleMode::uncertainty_weighted: {
      double var = 0.0;
      for (double s : scores) var += (s - mean) * (s - mean);
      var /= static_cast<double>(scores.size());
      return mean - k_unc * std::sqrt(var);
    }
  }
  throw ConfigError("ensemble: bad mode");
}

inline double ensemble_score(const EnsembleRM& e, std::span<const int> prompt,
                             std::span<const int> response) {
  if (e.members.empty()) throw ConfigError("ensemble: empty ensemble");
  std::vector<double> scores;
  scores.reserve(e.members.size());
  for (const RewardModel& m : e.members) scores.push_back(reward_score_value(m, prompt, response));
  return aggregate_scores(scores, e.mode, e.k_unc);
}

}  // namespace umrm
