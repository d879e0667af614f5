#pragma once

// Shared fixtures for the unit tests and the acceptance runner: a toy model
// instance, a toy reward, finite-difference checking and reconstruction of
// the RL surrogate losses from recorded samples.

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "qcap/training.hpp"

namespace qcap::testing {

inline ModelConfig toy_config(bool positional = true, int levels = 3) {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.d_model = 8;
  cfg.num_levels = levels;
  cfg.max_len = 4;
  cfg.feature_dim = 5;
  cfg.positional = positional;
  return cfg;
}

// Larger init than the training default so the finite differences are not
// dominated by rounding.
inline Params toy_params(std::uint64_t seed, bool positional = true, int levels = 3, double scale = 0.5) {
  Rng rng(seed);
  return Params::random(toy_config(positional, levels), rng, scale);
}

inline ImageContext toy_context(std::uint64_t seed, int dim = 5) {
  ImageContext ctx;
  ctx.image_id = "toy" + std::to_string(seed);
  ctx.feature = hashed_feature(ctx.image_id, dim);
  return ctx;
}

// Rewards in [0, 2]: half a point per token from {4..7}; spans all RL levels.
inline RewardFn toy_reward() {
  return [](std::span<const int> tokens) {
    double r = 0.0;
    for (int t : tokens) r += (t >= 4 && t <= 7) ? 0.5 : 0.0;
    return r;
  };
}

inline TrainConfig toy_train_config(Method method, int levels = 3) {
  TrainConfig cfg = method_config(method, true, true);
  cfg.k = 2;
  cfg.dropout = 0.0;
  cfg.optimizer = OptimizerKind::kSGD;
  if (levels != 3) {
    std::vector<double> cuts;
    for (int i = 1; i < levels; ++i) cuts.push_back(0.5 * i);
    cfg.xe_table = ThresholdTable(TableMode::kXE, cuts);
    cfg.rl_table = ThresholdTable(TableMode::kRL, cuts);
  }
  return cfg;
}

struct FdResult {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double max_rel = 0.0;
  std::string worst;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries
// whose true derivative is ~0 from turning rounding noise into huge ratios.
inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Central differences of `loss` around `params` for every scalar parameter.
inline FdResult finite_difference_check(const Params& params, const std::function<double(const Params&)>& loss,
                                        const Gradients<double>& analytic, double h = 1e-5, double tol = 1e-4) {
  FdResult out;
  Params probe = params;
  std::vector<std::pair<std::string, std::span<double>>> slots;
  probe.for_each([&](const char* name, std::span<double> s) { slots.emplace_back(name, s); });
  std::vector<std::span<const double>> grads;
  analytic.for_each([&](const char*, std::span<const double> s) { grads.push_back(s); });
  for (std::size_t t = 0; t < slots.size(); ++t) {
    auto& [name, values] = slots[t];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + h;
      const double up = loss(probe);
      values[i] = keep - h;
      const double down = loss(probe);
      values[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double rel = rel_error(grads[t][i], numeric);
      ++out.checked;
      if (rel >= tol) ++out.failed;
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

// The surrogate -(1/k) sum_i (r_i - b) log p(Y_i | I, beta_ns_i) with the
// samples, rewards and levels frozen, re-evaluated by teacher forcing.
// Samples excluded by the trainer (SAT filter) are excluded here too.
inline double rl_surrogate(const Params& params, const ImageContext& ctx, const ImageUpdate& upd,
                           const TrainConfig& cfg, bool scst) {
  double loss = 0.0;
  const double b = upd.report.baseline;
  for (const auto& rec : upd.records) {
    const bool contributes = scst || cfg.enable_low_reward_retention || rec.reward >= b;
    if (!contributes) continue;
    const double w = (rec.reward - b) / cfg.k;
    const int beta = scst ? 0 : rec.beta_ns;
    loss -= w * teacher_forced(params, ctx, beta, rec.tokens).total();
  }
  return loss;
}

// Tiny corpus shared by the quality and metric tests.
inline std::vector<RefSet> toy_corpus() {
  return {
      {"img1", {{"a", "man", "rides", "a", "horse"}, {"a", "man", "riding", "a", "horse"}, {"a", "person", "on", "a", "horse"}}},
      {"img2", {{"a", "dog", "runs", "on", "grass"}, {"a", "dog", "running"}}},
      {"img3", {{"two", "cats", "sleep"}, {"cats", "sleeping", "on", "a", "sofa"}}},
  };
}

inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace qcap::testing
