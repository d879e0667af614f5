#include <doctest.h>

#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "qcap/data.hpp"
#include "qcap/errors.hpp"
#include "qcap/training.hpp"
#include "support.hpp"

using namespace qcap;
using namespace qcap::testing;

namespace {

RewardFn constant_reward(double r) {
  return [r](std::span<const int>) { return r; };
}

// Returns the listed values in turn, one per call.
RewardFn scripted_reward(std::vector<double> values) {
  auto state = std::make_shared<std::pair<std::vector<double>, std::size_t>>(std::move(values), 0);
  return [state](std::span<const int>) {
    const double r = state->first[state->second % state->first.size()];
    ++state->second;
    return r;
  };
}

SampleRecord make_record(double reward, QualityLevel beta_s) {
  SampleRecord r;
  r.reward = reward;
  r.beta_s = beta_s;
  r.beta_ns = beta_s;
  return r;
}

ImageUpdate gradient_for(Method m, const ImageContext& ctx, const RewardFn& reward, const Params& p, Rng& rng,
                         const TrainConfig& cfg) {
  return m == Method::kSCST ? scst_gradient(ctx, reward, p, rng, cfg) : self_annotated_gradient(ctx, reward, p, rng, cfg);
}

}  // namespace

TEST_CASE("method names") {
  for (auto m : {Method::kXE, Method::kSCST, Method::kSAT, Method::kQSAT}) CHECK(method_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(method_from_string("ppo"), ConfigError);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate(3));
  cfg.k = 1;
  CHECK_THROWS_AS(cfg.validate(3), ConfigError);
  cfg = {};
  cfg.xe_epochs = 5;
  cfg.epochs = 5;
  CHECK_THROWS_AS(cfg.validate(3), ConfigError);
  cfg.method = Method::kXE;
  CHECK_NOTHROW(cfg.validate(3));
  CHECK_THROWS_AS(TrainConfig{}.validate(4), ConfigError);
}

TEST_CASE("method_config composes the ablation rows") {
  const auto q = method_config(Method::kQSAT, false, false);
  CHECK(q.enable_center_level);
  CHECK(q.enable_low_reward_retention);
  const auto s = method_config(Method::kSAT, false, false);
  CHECK_FALSE(s.enable_center_level);
  CHECK_FALSE(s.enable_low_reward_retention);
  const auto s9 = method_config(Method::kSAT, false, true);
  CHECK_FALSE(s9.enable_center_level);
  CHECK(s9.enable_low_reward_retention);
  const auto s25 = method_config(Method::kSAT, true, false);
  CHECK(s25.enable_center_level);
  CHECK_FALSE(s25.enable_low_reward_retention);
  const auto both = method_config(Method::kSAT, true, true);
  CHECK(both.enable_center_level == q.enable_center_level);
  CHECK(both.enable_low_reward_retention == q.enable_low_reward_retention);
  const auto sc = method_config(Method::kSCST, true, true);
  CHECK(sc.freeze_level_emb);
  CHECK_FALSE(sc.enable_center_level);
}

TEST_CASE("baseline is the mean reward") {
  CHECK(mean_baseline(std::vector<double>{1.2, 0.8}) == doctest::Approx(1.0));
  const std::vector<double> same(5, 0.1 + 0.2);
  CHECK(mean_baseline(same) == same[0]);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 3);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> r(5);
    for (auto& v : r) v = u(rng);
    CHECK(mean_baseline(r) == doctest::Approx(std::accumulate(r.begin(), r.end(), 0.0) / 5).epsilon(1e-14));
  }
}

TEST_CASE("center level") {
  const auto p = toy_params(1);
  const auto ctx = toy_context(1);
  auto cfg = toy_train_config(Method::kQSAT);
  Rng rng(1);
  const auto c = compute_center_level(ctx, constant_reward(0.9), p, rng, cfg);
  CHECK(c.mean_score == doctest::Approx(0.9));
  CHECK(c.beta_avg == 1);
  CHECK(c.discarded.size() == static_cast<std::size_t>(cfg.k));
  CHECK(compute_center_level(ctx, constant_reward(0.0), p, rng, cfg).beta_avg == 0);

  cfg.enable_center_level = false;
  std::vector<int> seen(3);
  for (int i = 0; i < 200; ++i) {
    const auto f = compute_center_level(ctx, constant_reward(0.9), p, rng, cfg);
    CHECK(f.discarded.empty());
    ++seen.at(f.beta_avg);
  }
  for (int n : seen) CHECK(n > 30);
}

TEST_CASE("level reassignment") {
  std::vector<SampleRecord> recs{make_record(1.2, 2), make_record(0.8, 2), make_record(1.0, 0)};
  const auto out = reassign_levels(recs, 1.0, 1);
  CHECK(out[0].beta_ns == 2);
  CHECK(out[1].beta_ns == 1);
  CHECK(out[2].beta_ns == 0);
  for (const auto& r : out) CHECK((r.beta_ns == r.beta_s || r.beta_ns == 1));
}

TEST_CASE("distribution substitution") {
  const auto p = toy_params(2);
  const auto ctx = toy_context(2);
  Rng rng(2);
  SampleRecord rec;
  rec.sampling_pass = sample_sequence(p, ctx, 1, rng, DecodeMode::kSample, DropoutMasks<double>::sampled(0.3, rng));
  rec.tokens = trace_tokens(rec.sampling_pass);
  rec.cached = true;
  rec.beta_ns = 1;
  CHECK(&substitute_distributions(rec, 1, nullptr) == &rec.sampling_pass);

  const auto fresh = teacher_forced(p, ctx, 2, rec.tokens);
  rec.beta_ns = 2;
  CHECK(&substitute_distributions(rec, 1, &fresh) == &fresh);
  CHECK_THROWS_AS(substitute_distributions(rec, 1, nullptr), ContractViolation);
  const auto wrong = teacher_forced(p, ctx, 0, rec.tokens);
  CHECK_THROWS_AS(substitute_distributions(rec, 1, &wrong), ContractViolation);

  rec.beta_ns = 1;
  rec.cached = false;
  CHECK_THROWS_AS(substitute_distributions(rec, 1, nullptr), ContractViolation);

  // without dropout the cached and recomputed passes are the same numbers
  Rng r2(5);
  const auto s = sample_sequence(p, ctx, 1, r2);
  CHECK(bitwise_equal(teacher_forced(p, ctx, 1, trace_tokens(s)).logprobs, s.logprobs));
}

TEST_CASE("equal rewards leave the parameters untouched") {
  for (auto m : {Method::kSCST, Method::kSAT, Method::kQSAT}) {
    for (bool retain : {false, true}) {
      for (auto opt : {OptimizerKind::kSGD, OptimizerKind::kAdam}) {
        auto cfg = toy_train_config(m);
        if (m == Method::kSAT) cfg = method_config(Method::kSAT, !retain, retain, cfg);
        cfg.optimizer = opt;
        cfg.dropout = 0.2;
        auto p = toy_params(3);
        if (m == Method::kSCST) p.level_emb.setZero();
        const auto before = p;
        Optimizer o(cfg, 0.1);
        Rng rng(3);
        const auto ctx = toy_context(3);
        const auto rep = m == Method::kSCST ? scst_update(ctx, constant_reward(0.7), p, rng, cfg, o)
                                            : qsat_update(ctx, constant_reward(0.7), p, rng, cfg, o);
        CHECK(rep.baseline == 0.7);
        CHECK(rep.grad_norm == 0.0);
        CHECK(p == before);
      }
    }
  }
}

TEST_CASE("SAT drops low-reward samples and retention brings them back") {
  const auto p = toy_params(4);
  const auto ctx = toy_context(4);
  auto sat = toy_train_config(Method::kSAT);
  sat = method_config(Method::kSAT, false, false, sat);
  Rng r1(4);
  const auto a = self_annotated_gradient(ctx, scripted_reward({1.2, 0.8}), p, r1, sat);
  CHECK(a.report.baseline == doctest::Approx(1.0));
  CHECK(a.report.contributing == 1);
  CHECK(a.report.reassigned == 0);

  auto s9 = method_config(Method::kSAT, false, true, sat);
  Rng r2(4);
  const auto b = self_annotated_gradient(ctx, scripted_reward({1.2, 0.8}), p, r2, s9);
  CHECK(b.report.contributing == 2);
  CHECK(b.records[1].beta_ns == b.report.beta_avg);
  CHECK(b.records[0].beta_ns == b.records[0].beta_s);

  // every r <= b with equality everywhere: nothing to learn
  Rng r3(4);
  CHECK(self_annotated_gradient(ctx, scripted_reward({0.5, 0.5}), p, r3, sat).report.contributing == 0);
}

TEST_CASE("Q-SAT with both steps off is SAT") {
  const auto p = toy_params(5);
  const auto ctx = toy_context(5);
  auto q = toy_train_config(Method::kQSAT);
  q.enable_center_level = false;
  q.enable_low_reward_retention = false;
  const auto s = method_config(Method::kSAT, false, false, q);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng r1(seed), r2(seed);
    const auto a = self_annotated_gradient(ctx, toy_reward(), p, r1, q);
    const auto b = self_annotated_gradient(ctx, toy_reward(), p, r2, s);
    CHECK(a.report.rewards == b.report.rewards);
    CHECK(a.report.beta_ns == b.report.beta_ns);
    CHECK(a.grad == b.grad);
    CHECK(r1() == r2());
  }
}

TEST_CASE("Q-SAT with a single level is the self-critical baseline") {
  auto p = toy_params(6, true, 1);
  p.level_emb.setZero();
  const auto ctx = toy_context(6);
  const auto q = toy_train_config(Method::kQSAT, 1);
  const auto s = toy_train_config(Method::kSCST, 1);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng r1(seed), r2(seed);
    const auto a = self_annotated_gradient(ctx, toy_reward(), p, r1, q);
    const auto b = scst_gradient(ctx, toy_reward(), p, r2, s);
    CHECK(a.report.rewards == b.report.rewards);
    CHECK(a.report.baseline == b.report.baseline);
    CHECK(a.grad == b.grad);
  }
}

TEST_CASE("self-critical training requires a zero level embedding") {
  const auto p = toy_params(7);
  Rng rng(7);
  CHECK_THROWS_AS(scst_gradient(toy_context(7), toy_reward(), p, rng, toy_train_config(Method::kSCST)),
                  ContractViolation);
}

TEST_CASE("trainer gradients match finite differences of the surrogate") {
  int checked_images = 0, saw_reassign = 0;
  for (auto m : {Method::kSCST, Method::kSAT, Method::kQSAT}) {
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
      auto p = toy_params(seed);
      if (m == Method::kSCST) p.level_emb.setZero();
      auto cfg = toy_train_config(m);
      if (m == Method::kSAT) cfg = method_config(Method::kSAT, false, false, cfg);
      const auto ctx = toy_context(seed);
      Rng rng(seed);
      const auto upd = gradient_for(m, ctx, toy_reward(), p, rng, cfg);
      if (upd.report.contributing == 0) continue;
      ++checked_images;
      saw_reassign += upd.report.reassigned > 0;
      const bool scst = m == Method::kSCST;
      CHECK(rl_surrogate(p, ctx, upd, cfg, scst) == doctest::Approx(upd.report.surrogate_loss).epsilon(1e-12));
      const auto res = finite_difference_check(
          p, [&](const Params& q) { return rl_surrogate(q, ctx, upd, cfg, scst); }, upd.grad);
      CAPTURE(to_string(m));
      CAPTURE(seed);
      CAPTURE(res.worst);
      CHECK(res.failed == 0);
    }
  }
  CHECK(checked_images >= 15);
  CHECK(saw_reassign > 0);
}

TEST_CASE("cross-entropy gradient and step") {
  const auto p0 = toy_params(8);
  std::vector<XeExample> batch{{toy_context(1), {4, 5, 6}, 0}, {toy_context(2), {7, 8}, 2}, {toy_context(3), {9}, 1}};
  auto grad = Gradients<double>::zeros(p0.config);
  Rng rng(8);
  const double loss = xe_gradient(p0, batch, 0.0, rng, grad);
  double manual = 0.0;
  for (const auto& ex : batch) manual -= teacher_forced(p0, ex.ctx, ex.level, ex.tokens).total();
  CHECK(loss == doctest::Approx(manual / 3).epsilon(1e-14));
  CHECK(xe_loss(p0, batch) == doctest::Approx(loss).epsilon(1e-14));
  const auto res = finite_difference_check(p0, [&](const Params& q) { return xe_loss(q, batch); }, grad);
  CHECK(res.failed == 0);

  auto p = p0;
  auto cfg = toy_train_config(Method::kXE);
  Optimizer opt(cfg, 1e-2);
  Rng r2(8);
  xe_update(batch, p, r2, cfg, opt);
  CHECK(xe_loss(p, batch) < loss);
}

TEST_CASE("level embedding used by cross-entropy is the annotated one") {
  const auto p = toy_params(9);
  std::vector<XeExample> batch{{toy_context(1), {4, 5}, 2}};
  auto grad = Gradients<double>::zeros(p.config);
  Rng rng(1);
  xe_gradient(p, batch, 0.0, rng, grad);
  CHECK(grad.level_emb.row(2).norm() > 0);
  CHECK(grad.level_emb.row(0).norm() == 0);
  CHECK(grad.level_emb.row(1).norm() == 0);
}

TEST_CASE("a small step raises the log-prob of a rewarded sample") {
  int tested = 0;
  for (std::uint64_t seed = 1; seed <= 30 && tested < 5; ++seed) {
    auto p = toy_params(seed);
    const auto ctx = toy_context(seed);
    auto cfg = toy_train_config(Method::kQSAT);
    Rng rng(seed);
    Rng probe = rng;
    const auto upd = self_annotated_gradient(ctx, toy_reward(), p, probe, cfg);
    int best = -1;
    for (std::size_t i = 0; i < upd.records.size(); ++i) {
      const auto& r = upd.records[i];
      if (r.reward > upd.report.baseline && r.beta_ns == r.beta_s) best = static_cast<int>(i);
    }
    if (best < 0) continue;
    ++tested;
    const auto& rec = upd.records[best];
    const double before = teacher_forced(p, ctx, rec.beta_ns, rec.tokens).total();
    Optimizer opt(cfg, 1e-3);
    qsat_update(ctx, toy_reward(), p, rng, cfg, opt);
    CHECK(teacher_forced(p, ctx, rec.beta_ns, rec.tokens).total() > before);
  }
  CHECK(tested >= 3);
}

TEST_CASE("shared-mask recomputation agrees with the cache") {
  const auto p = toy_params(10);
  const auto ctx = toy_context(10);
  auto cfg = toy_train_config(Method::kQSAT);
  cfg.dropout = 0.25;
  cfg.substitution = SubstitutionMode::kRecomputeSharedMask;
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    Rng rng(seed);
    CHECK_NOTHROW(self_annotated_gradient(ctx, toy_reward(), p, rng, cfg));
  }
}

TEST_CASE("non-finite values abort") {
  auto p = toy_params(11);
  p.out_b[5] = std::numeric_limits<double>::quiet_NaN();
  std::vector<XeExample> batch{{toy_context(1), {5}, 0}};
  auto grad = Gradients<double>::zeros(p.config);
  Rng rng(1);
  CHECK_THROWS_AS(xe_gradient(p, batch, 0.0, rng, grad), NumericalError);

  const auto q = toy_params(11);
  const RewardFn bad = scripted_reward({1.0, std::numeric_limits<double>::quiet_NaN()});
  Rng r2(1);
  CHECK_THROWS_AS(self_annotated_gradient(toy_context(1), bad, q, r2, toy_train_config(Method::kQSAT)), NumericalError);
}

TEST_CASE("updates are deterministic for a fixed seed") {
  auto run = [] {
    auto p = toy_params(12);
    auto cfg = toy_train_config(Method::kQSAT);
    cfg.dropout = 0.1;
    cfg.optimizer = OptimizerKind::kAdam;
    Optimizer opt(cfg, 1e-2);
    Rng rng = derive_stream(12, "rl");
    std::vector<double> trail;
    for (int i = 0; i < 20; ++i) {
      const auto rep = qsat_update(toy_context(i % 3), toy_reward(), p, rng, cfg, opt);
      trail.push_back(rep.baseline);
      trail.push_back(rep.grad_norm);
    }
    return std::make_pair(p, trail);
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(bitwise_equal(a.second, b.second));
}

TEST_CASE("derived streams differ by name and seed") {
  auto a = derive_stream(1, "xe"), b = derive_stream(1, "rl"), c = derive_stream(2, "xe"), d = derive_stream(1, "xe");
  const auto va = a();
  CHECK(va != b());
  CHECK(va != c());
  CHECK(va == d());
}

TEST_CASE("evaluation sweep and a short training run") {
  SynthConfig sc;
  sc.n_images = 30;
  sc.feature_dim = 8;
  const auto ds = gen_synthetic_corpus(sc);
  ModelConfig mc;
  mc.vocab_size = ds.vocab.size();
  mc.d_model = 8;
  mc.feature_dim = 8;
  mc.max_len = 12;

  auto zero = Params::zeros(mc);
  Rng init(1);
  zero = Params::random(mc, init);
  zero.level_emb.setZero();
  const auto rows = evaluate_sweep(zero, ds, ds.val, ds.stats);
  REQUIRE(rows.size() == 3);
  for (int l = 0; l < 3; ++l) {
    CHECK(rows[l].level == l);
    CHECK(rows[l].cider == rows[0].cider);
    CHECK(rows[l].bleu4 == rows[0].bleu4);
    CHECK(rows[l].n_images == static_cast<int>(ds.val.size()));
  }
  CHECK(evaluate_model(zero, ds, ds.val, 2, ds.stats, 3).cider == rows[2].cider);

  auto cfg = method_config(Method::kQSAT, true, true);
  cfg.xe_epochs = 1;
  cfg.epochs = 2;
  std::vector<std::string> lines;
  const auto a = train(ds, cfg, mc, std::nullopt, [&](const EpochLog& e) { lines.push_back(epoch_log_json(e)); });
  const auto b = train(ds, cfg, mc);
  REQUIRE(a.log.size() == 2);
  CHECK(a.log[0].phase == "xe");
  CHECK(a.log[1].phase == "qsat");
  CHECK(a.log[1].val.size() == 3);
  CHECK(lines.size() == 2);
  CHECK(a.params == b.params);
  CHECK(a.rng_state == b.rng_state);
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(epoch_log_json(a.log[i]) == epoch_log_json(b.log[i]));
}
