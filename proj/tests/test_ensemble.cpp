#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "umrm/ensemble.hpp"

using namespace umrm;

namespace {

TransformerConfig tiny_config(uint64_t seed) {
  TransformerConfig cfg;
  cfg.vocab_size = 15;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq = 16;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("aggregate: worked example [1,2,3,4]") {
  std::vector<double> scores = {1.0, 2.0, 3.0, 4.0};
  REQUIRE(aggregate_scores(scores, EnsembleMode::mean, 1.0) == Catch::Approx(2.5).margin(1e-15));
  REQUIRE(aggregate_scores(scores, EnsembleMode::worst_case, 1.0) ==
          Catch::Approx(1.0).margin(1e-15));
  // population std of [1,2,3,4] is sqrt(1.25)
  REQUIRE(aggregate_scores(scores, EnsembleMode::uncertainty_weighted, 1.0) ==
          Catch::Approx(2.5 - 1.118034).margin(1e-6));
}

TEST_CASE("aggregate: invariants over random member scores") {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> scores(4);
    for (double& s : scores) s = rng.normal(0.0, 2.0);

    const double mean = aggregate_scores(scores, EnsembleMode::mean, 1.0);
    const double worst = aggregate_scores(scores, EnsembleMode::worst_case, 1.0);
    REQUIRE(mean >= worst);  // average dominates minimum
    REQUIRE(aggregate_scores(scores, EnsembleMode::uncertainty_weighted, 0.0) == mean);

    // order invariance
    std::vector<double> shuffled = scores;
    std::reverse(shuffled.begin(), shuffled.end());
    for (EnsembleMode mode :
         {EnsembleMode::mean, EnsembleMode::worst_case, EnsembleMode::uncertainty_weighted})
      REQUIRE(aggregate_scores(shuffled, mode, 1.0) ==
              Catch::Approx(aggregate_scores(scores, mode, 1.0)).margin(1e-12));

    // translation equivariance
    const double c = rng.normal(0.0, 3.0);
    std::vector<double> shifted = scores;
    for (double& s : shifted) s += c;
    for (EnsembleMode mode :
         {EnsembleMode::mean, EnsembleMode::worst_case, EnsembleMode::uncertainty_weighted})
      REQUIRE(aggregate_scores(shifted, mode, 1.0) ==
              Catch::Approx(aggregate_scores(scores, mode, 1.0) + c).margin(1e-12));
  }
}

TEST_CASE("ensemble_score: identical members collapse every mode to the member score") {
  EnsembleRM e;
  RewardModel m = make_model(tiny_config(83), HeadKind::reward);
  Rng rng(5);
  for (double& v : m.head_w.data()) v = rng.normal(0.0, 0.3);
  e.members.push_back(clone_model(m));
  e.members.push_back(clone_model(m));
  e.members.push_back(clone_model(m));

  std::vector<int> prompt = {3, 4}, response = {5, 6, 7};
  const double single = reward_score_value(m, prompt, response);
  for (EnsembleMode mode :
       {EnsembleMode::mean, EnsembleMode::worst_case, EnsembleMode::uncertainty_weighted}) {
    e.mode = mode;
    e.k_unc = 2.0;
    REQUIRE(ensemble_score(e, prompt, response) == Catch::Approx(single).margin(1e-12));
  }
}

TEST_CASE("ensemble_score: empty ensemble is an error") {
  EnsembleRM e;
  std::vector<int> prompt = {3}, response = {4};
  REQUIRE_THROWS_AS(ensemble_score(e, prompt, response), ConfigError);
}

TEST_CASE("ensemble mode names round-trip") {
  for (EnsembleMode mode :
       {EnsembleMode::mean, EnsembleMode::worst_case, EnsembleMode::uncertainty_weighted})
    REQUIRE(ensemble_mode_from_name(ensemble_mode_name(mode)) == mode);
  REQUIRE_THROWS_AS(ensemble_mode_from_name("median"), ConfigError);
}
