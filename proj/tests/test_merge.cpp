#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "umrm/gradcheck.hpp"
#include "umrm/merge.hpp"
#include "umrm/moe.hpp"

using namespace umrm;

namespace {

TransformerConfig small_config(uint64_t seed) {
  TransformerConfig cfg;
  cfg.vocab_size = 15;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq = 16;
  cfg.seed = seed;
  return cfg;
}

DenseFFN constant_ffn(double v, size_t d = 1, size_t f = 1) {
  return {Tensor::from({d, f}, std::vector<double>(d * f, v)),
          Tensor::from({f}, std::vector<double>(f, v)),
          Tensor::from({f, d}, std::vector<double>(f * d, v)),
          Tensor::from({d}, std::vector<double>(d, v))};
}

PreferenceDataset toy_prefs(size_t n, size_t vocab, uint64_t seed) {
  PreferenceDataset prefs;
  Rng rng(seed);
  for (size_t i = 0; i < n; ++i) {
    PreferencePair p;
    auto tok = [&] { return 3 + static_cast<int>(rng.randint(0, static_cast<int64_t>(vocab) - 4)); };
    for (int j = 0; j < 3; ++j) p.prompt.push_back(tok());
    for (int j = 0; j < 4; ++j) p.chosen.push_back(tok());
    for (int j = 0; j < 4; ++j) p.rejected.push_back(tok());
    if (p.chosen == p.rejected) p.rejected[0] = p.rejected[0] == 3 ? 4 : 3;
    prefs.push_back(std::move(p));
  }
  return prefs;
}

}  // namespace

TEST_CASE("alpha_from_logits: symmetry, limits and exact arithmetic") {
  std::vector<double> zero = {0.0, 0.0};
  std::vector<double> a = alpha_from_logits(zero, 0.5);
  REQUIRE(a[0] == Catch::Approx(0.25).margin(1e-15));
  REQUIRE(a[1] == Catch::Approx(0.25).margin(1e-15));

  std::vector<double> any = {3.7, -1.2, 0.4};
  std::vector<double> near_one = alpha_from_logits(any, 1.0 - 1e-9);
  for (double v : near_one) REQUIRE(v < 1e-9);

  std::vector<double> logs = {std::log(3.0), std::log(2.0)};
  std::vector<double> exact = alpha_from_logits(logs, 0.5);
  REQUIRE(exact[0] == Catch::Approx(0.3).margin(1e-12));
  REQUIRE(exact[1] == Catch::Approx(0.2).margin(1e-12));

  REQUIRE_THROWS_AS(alpha_from_logits(zero, 0.0), ConfigError);
  REQUIRE_THROWS_AS(alpha_from_logits(zero, 1.0), ConfigError);
}

TEST_CASE("merge_layer: scalar stand-in arithmetic") {
  MoELayer layer;
  layer.shared = constant_ffn(2.0);
  layer.normal = {constant_ffn(4.0), constant_ffn(6.0)};
  layer.router.logits = Tensor::zeros({1, 2});
  std::vector<double> alpha = {0.3, 0.2};
  DenseFFN merged = merge_layer(layer, 0.5, alpha);
  for (const Tensor* t : {&merged.w_in, &merged.b_in, &merged.w_out, &merged.b_out})
    REQUIRE(t->data()[0] == Catch::Approx(3.4).margin(1e-15));
}

TEST_CASE("merge_layer: identical experts are a fixed point for any (lambda, alpha)") {
  Rng rng(3);
  MoELayer layer;
  layer.shared = {Tensor::randn({4, 6}, rng, 0.5), Tensor::randn({6}, rng, 0.5),
                  Tensor::randn({6, 4}, rng, 0.5), Tensor::randn({4}, rng, 0.5)};
  layer.normal = {detail::clone_ffn(layer.shared), detail::clone_ffn(layer.shared),
                  detail::clone_ffn(layer.shared)};
  for (double lambda : {0.25, 0.5, 0.75}) {
    std::vector<double> alpha = alpha_from_logits(std::vector<double>{0.3, -1.0, 2.0}, lambda);
    DenseFFN merged = merge_layer(layer, lambda, alpha);
    for (size_t i = 0; i < merged.w_in.size(); ++i)
      REQUIRE(merged.w_in.data()[i] ==
              Catch::Approx(layer.shared.w_in.data()[i]).margin(1e-12));
    for (size_t i = 0; i < merged.b_out.size(); ++i)
      REQUIRE(merged.b_out.data()[i] ==
              Catch::Approx(layer.shared.b_out.data()[i]).margin(1e-12));
  }
}

TEST_CASE("merge_layer: rejects alpha that violates the sum constraint") {
  MoELayer layer;
  layer.shared = constant_ffn(1.0);
  layer.normal = {constant_ffn(2.0), constant_ffn(3.0)};
  std::vector<double> bad = {0.3, 0.3};  // sums to 0.6 != 1 - 0.5
  REQUIRE_THROWS_AS(merge_layer(layer, 0.5, bad), ConfigError);
}

TEST_CASE("merge_layer: convexity envelope") {
  Rng rng(11);
  MoELayer layer;
  layer.shared = {Tensor::randn({3, 5}, rng, 1.0), Tensor::randn({5}, rng, 1.0),
                  Tensor::randn({5, 3}, rng, 1.0), Tensor::randn({3}, rng, 1.0)};
  for (int e = 0; e < 2; ++e)
    layer.normal.push_back({Tensor::randn({3, 5}, rng, 1.0), Tensor::randn({5}, rng, 1.0),
                            Tensor::randn({5, 3}, rng, 1.0), Tensor::randn({3}, rng, 1.0)});
  std::vector<double> alpha = alpha_from_logits(std::vector<double>{0.7, -0.4}, 0.3);
  DenseFFN merged = merge_layer(layer, 0.3, alpha);
  for (size_t i = 0; i < merged.w_in.size(); ++i) {
    double lo = layer.shared.w_in.data()[i], hi = lo;
    for (const DenseFFN& e : layer.normal) {
      lo = std::min(lo, e.w_in.data()[i]);
      hi = std::max(hi, e.w_in.data()[i]);
    }
    REQUIRE(merged.w_in.data()[i] >= lo - 1e-12);
    REQUIRE(merged.w_in.data()[i] <= hi + 1e-12);
  }
}

TEST_CASE("merge_model: merged untrained upcycle reproduces the dense source") {
  RewardModel dense = make_model(small_config(51), HeadKind::reward);
  Rng rng(4);
  for (double& v : dense.head_w.data()) v = rng.normal(0.0, 0.3);

  UpcycleConfig ucfg;
  ucfg.n_normal_experts = 3;
  RewardModel moe = upcycle(dense, ucfg);

  MergeParams params;
  params.lambda = 0.5;
  params.mixing_logits.assign(2, std::vector<double>(3, 0.0));
  MergedModel merged = merge_model(moe, params);

  REQUIRE(!is_moe(merged.model));
  REQUIRE(param_count(merged.model) == param_count(dense));
  REQUIRE(merged.provenance.lambda == 0.5);
  REQUIRE(merged.provenance.alpha.size() == 2);

  // non-FFN tensors byte-identical; FFN within 1e-10; outputs within 1e-10
  REQUIRE(merged.model.tok_emb.data() == dense.tok_emb.data());
  REQUIRE(merged.model.blocks[0].attn.w_q.data() == dense.blocks[0].attn.w_q.data());
  const auto& mffn = std::get<DenseFFN>(merged.model.blocks[0].ffn);
  const auto& dffn = std::get<DenseFFN>(dense.blocks[0].ffn);
  for (size_t i = 0; i < mffn.w_in.size(); ++i)
    REQUIRE(mffn.w_in.data()[i] == Catch::Approx(dffn.w_in.data()[i]).margin(1e-10));

  for (int trial = 0; trial < 10; ++trial) {
    Rng trng(substream(2000, "merge-identity", static_cast<uint64_t>(trial)));
    std::vector<int> prompt(3), response(4);
    for (int& t : prompt) t = 3 + static_cast<int>(trng.randint(0, 11));
    for (int& t : response) t = 3 + static_cast<int>(trng.randint(0, 11));
    REQUIRE(std::abs(reward_score_value(merged.model, prompt, response) -
                     reward_score_value(dense, prompt, response)) < 1e-10);
  }
}

TEST_CASE("merge_model: expert-count mismatch is an error") {
  RewardModel dense = make_model(small_config(53), HeadKind::reward);
  UpcycleConfig ucfg;
  ucfg.n_normal_experts = 3;
  RewardModel moe = upcycle(dense, ucfg);
  MergeParams params;
  params.lambda = 0.5;
  params.mixing_logits.assign(2, std::vector<double>(2, 0.0));  // wrong expert count
  REQUIRE_THROWS_AS(merge_model(moe, params), ConfigError);
  params.mixing_logits.assign(1, std::vector<double>(3, 0.0));  // wrong layer count
  REQUIRE_THROWS_AS(merge_model(moe, params), ConfigError);
}

TEST_CASE("fit_merge: constraint holds after every step and lambda floor is exact") {
  RewardModel dense = make_model(small_config(55), HeadKind::reward);
  Rng rng(5);
  for (double& v : dense.head_w.data()) v = rng.normal(0.0, 0.3);
  UpcycleConfig ucfg;
  ucfg.n_normal_experts = 3;
  ucfg.noise_scale = 1e-2;
  RewardModel moe = upcycle(dense, ucfg, /*noise_seed=*/9);

  PreferenceDataset prefs = toy_prefs(16, 15, 77);
  FitMergeResult fit = fit_merge(moe, prefs, 0.5, 20, 0.05, 8, 123);

  REQUIRE(fit.losses.size() == 20);
  REQUIRE(fit.max_constraint_residual < 1e-12);
  REQUIRE(fit.merged.provenance.lambda == 0.5);
  for (const auto& alpha : fit.merged.provenance.alpha) {
    double sum = 0.0;
    for (double a : alpha) {
      REQUIRE(a >= 0.0);
      sum += a;
    }
    REQUIRE(std::abs(sum - 0.5) < 1e-12);
  }
}

TEST_CASE("fit_merge: single normal expert forces alpha = 1 - lambda") {
  RewardModel dense = make_model(small_config(57), HeadKind::reward);
  UpcycleConfig ucfg;
  ucfg.n_normal_experts = 1;
  RewardModel moe = upcycle(dense, ucfg);
  PreferenceDataset prefs = toy_prefs(8, 15, 78);
  FitMergeResult fit = fit_merge(moe, prefs, 0.25, 5, 0.1, 4, 5);
  for (const auto& alpha : fit.merged.provenance.alpha) {
    REQUIRE(alpha.size() == 1);
    REQUIRE(alpha[0] == Catch::Approx(0.75).margin(1e-15));
  }
}

TEST_CASE("fit_merge: identical experts make the objective flat") {
  RewardModel dense = make_model(small_config(59), HeadKind::reward);
  Rng rng(6);
  for (double& v : dense.head_w.data()) v = rng.normal(0.0, 0.3);
  UpcycleConfig ucfg;
  ucfg.n_normal_experts = 3;  // noise 0: all experts stay equal to the source
  RewardModel moe = upcycle(dense, ucfg);
  PreferenceDataset prefs = toy_prefs(8, 15, 79);
  FitMergeResult fit = fit_merge(moe, prefs, 0.5, 10, 0.1, 8, 6);
  // merged weights equal the (shared) expert weights no matter the logits
  const auto& mffn = std::get<DenseFFN>(fit.merged.model.blocks[0].ffn);
  const auto& source = std::get<DenseFFN>(dense.blocks[0].ffn);
  for (size_t i = 0; i < mffn.w_in.size(); ++i)
    REQUIRE(mffn.w_in.data()[i] == Catch::Approx(source.w_in.data()[i]).margin(1e-12));
}

TEST_CASE("fit_merge: seeded run does not increase the BT loss") {
  RewardModel dense = make_model(small_config(61), HeadKind::reward);
  PreferenceDataset train = toy_prefs(64, 15, 80);
  bt_train(dense, train, 30, 8, 1e-3, 42);

  UpcycleConfig ucfg;
  ucfg.n_normal_experts = 3;
  ucfg.noise_scale = 1e-2;
  RewardModel moe = upcycle(dense, ucfg, 17);
  bt_train(moe, train, 30, 8, 1e-3, 43);

  FitMergeResult fit = fit_merge(moe, train, 0.5, 50, 0.05, 64, 44);
  REQUIRE(fit.losses.back() <= fit.losses.front());
}

TEST_CASE("BT loss gradient w.r.t. mixing logits matches finite differences") {
  Rng rng(7);
  TransformerConfig one_layer = small_config(63);
  one_layer.n_layers = 1;
  RewardModel dense1 = make_model(one_layer, HeadKind::reward);
  for (double& v : dense1.head_w.data()) v = rng.normal(0.0, 0.3);

  UpcycleConfig ucfg;
  ucfg.n_normal_experts = 2;
  ucfg.noise_scale = 5e-2;
  RewardModel moe = upcycle(dense1, ucfg, 31);
  set_trainable(moe, false);

  PreferenceDataset prefs = toy_prefs(4, 15, 81);
  std::vector<size_t> indices = {0, 1, 2, 3};
  const double lambda = 0.4;
  Tensor logits = Tensor::from({1, 2}, {0.2, -0.3}, true);

  auto program = [&](Graph& g) {
    RewardModel candidate = moe;  // shallow copy
    Tensor alpha_row = g.scale(g.softmax_rows(logits), 1.0 - lambda);
    candidate.blocks[0].ffn =
        merge_layer_graph(g, std::get<MoELayer>(moe.blocks[0].ffn), lambda, alpha_row);
    return bt_loss(g, candidate, prefs, indices);
  };
  REQUIRE(finite_diff_check(program, {logits}) < 1e-6);
}
