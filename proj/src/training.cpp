#include "qcap/training.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "qcap/errors.hpp"

namespace qcap {

std::string to_string(Method m) {
  switch (m) {
    case Method::kXE:
      return "xe";
    case Method::kSCST:
      return "scst";
    case Method::kSAT:
      return "sat";
    case Method::kQSAT:
      return "qsat";
  }
  return "?";
}

Method method_from_string(std::string_view s) {
  if (s == "xe") return Method::kXE;
  if (s == "scst") return Method::kSCST;
  if (s == "sat") return Method::kSAT;
  if (s == "qsat") return Method::kQSAT;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

void TrainConfig::validate(int num_levels) const {
  if (k < 2) throw ConfigError("k must be at least 2");
  if (xe_epochs < 0 || epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (method != Method::kXE && !(xe_epochs < epochs)) throw ConfigError("RL epoch range [M, N) is empty");
  if (batch_size < 1 || xe_batch_size < 1) throw ConfigError("batch sizes must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (xe_table.num_levels() != num_levels || rl_table.num_levels() != num_levels) {
    throw ConfigError("threshold tables must define " + std::to_string(num_levels) + " levels");
  }
}

Rng derive_stream(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return Rng(seq);
}

RewardFactory cider_reward(const DfStats& stats, const Vocab& vocab) {
  return [&stats, &vocab](const RefSet& refs) -> RewardFn {
    auto scorer = std::make_shared<CiderScorer>(stats, refs.refs);
    return [scorer, &vocab](std::span<const int> tokens) { return scorer->score(vocab.decode(tokens)); };
  };
}

double mean_baseline(std::span<const double> rewards) {
  if (rewards.empty()) return 0.0;
  const double r0 = rewards.front();
  double acc = 0.0;
  for (double r : rewards) acc += r - r0;
  return r0 + acc / static_cast<double>(rewards.size());
}

namespace {

void check_finite(const Gradients<double>& grad, const char* where) {
  if (!grad.all_finite()) throw NumericalError(std::string("non-finite gradient in ") + where);
}

void add_scaled(Gradients<double>& dst, const Gradients<double>& src, double w) {
  std::vector<std::span<const double>> from;
  src.for_each([&](const char*, std::span<const double> s) { from.push_back(s); });
  std::size_t t = 0;
  dst.for_each([&](const char*, std::span<double> s) {
    for (std::size_t e = 0; e < s.size(); ++e) s[e] += w * from[t][e];
    ++t;
  });
}

SampleRecord draw_sample(const Params& params, const ImageContext& ctx, QualityLevel beta, Rng& rng, double dropout,
                         const RewardFn& reward) {
  SampleRecord rec;
  rec.sampling_pass =
      sample_sequence(params, ctx, beta, rng, DecodeMode::kSample, DropoutMasks<double>::sampled(dropout, rng));
  rec.cached = true;
  rec.tokens = trace_tokens(rec.sampling_pass);
  rec.reward = reward(rec.tokens);
  rec.beta_init = beta;
  return rec;
}

}  // namespace

double xe_loss(const Params& params, std::span<const XeExample> batch) {
  if (batch.empty()) return 0.0;
  double loss = 0.0;
  for (const auto& ex : batch) loss -= teacher_forced(params, ex.ctx, ex.level, ex.tokens).total();
  return loss / static_cast<double>(batch.size());
}

double xe_gradient(const Params& params, std::span<const XeExample> batch, double dropout, Rng& rng,
                   Gradients<double>& grad) {
  if (batch.empty()) return 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& ex : batch) {
    const auto trace = teacher_forced(params, ex.ctx, ex.level, ex.tokens, DropoutMasks<double>::sampled(dropout, rng));
    loss -= trace.total();
    accumulate_gradient(params, trace, w, grad);
  }
  loss *= w;
  if (!std::isfinite(loss)) throw NumericalError("non-finite cross-entropy loss");
  check_finite(grad, "cross-entropy step");
  return loss;
}

CenterLevel compute_center_level(const ImageContext& ctx, const RewardFn& reward, const Params& params, Rng& rng,
                                 const TrainConfig& cfg) {
  CenterLevel out;
  const int levels = params.config.num_levels;
  if (levels == 1) return out;
  std::uniform_int_distribution<int> pick(0, levels - 1);
  if (!cfg.enable_center_level) {
    out.beta_avg = pick(rng);
    return out;
  }
  std::vector<QualityLevel> init(cfg.k);
  for (auto& b : init) b = pick(rng);
  double total = 0.0;
  for (int i = 0; i < cfg.k; ++i) {
    out.discarded.push_back(draw_sample(params, ctx, init[i], rng, cfg.dropout, reward));
    total += out.discarded.back().reward;
  }
  out.mean_score = total / cfg.k;
  out.beta_avg = assign_level(out.mean_score, cfg.rl_table);
  return out;
}

std::vector<SampleRecord> reassign_levels(std::vector<SampleRecord> records, double baseline, QualityLevel beta_avg) {
  for (auto& r : records) r.beta_ns = r.reward >= baseline ? r.beta_s : beta_avg;
  return records;
}

const Trace& substitute_distributions(const SampleRecord& record, QualityLevel beta_avg, const Trace* second_pass) {
  if (record.beta_ns == beta_avg) {
    if (!record.cached || record.sampling_pass.logprobs.empty()) {
      throw ContractViolation("sampling-pass distributions were not cached");
    }
    return record.sampling_pass;
  }
  if (!second_pass) throw ContractViolation("levels differ but no second pass was supplied");
  if (second_pass->beta != record.beta_ns) throw ContractViolation("second pass was not run at the reassigned level");
  return *second_pass;
}

ImageUpdate self_annotated_gradient(const ImageContext& ctx, const RewardFn& reward, const Params& params, Rng& rng,
                                    const TrainConfig& cfg) {
  ImageUpdate out;
  out.grad = Gradients<double>::zeros(params.config);
  const CenterLevel center = compute_center_level(ctx, reward, params, rng, cfg);
  const QualityLevel beta_avg = center.beta_avg;

  std::vector<SampleRecord> records;
  std::vector<double> rewards;
  for (int i = 0; i < cfg.k; ++i) {
    records.push_back(draw_sample(params, ctx, beta_avg, rng, cfg.dropout, reward));
    records.back().beta_s = assign_level(records.back().reward, cfg.rl_table);
    records.back().beta_ns = records.back().beta_s;
    rewards.push_back(records.back().reward);
  }
  const double b = mean_baseline(rewards);
  if (cfg.enable_low_reward_retention) records = reassign_levels(std::move(records), b, beta_avg);

  auto& rep = out.report;
  rep.baseline = b;
  rep.beta_avg = beta_avg;
  rep.center_score = center.mean_score;
  rep.rewards = rewards;
  rep.mean_reward = std::accumulate(rewards.begin(), rewards.end(), 0.0) / cfg.k;

  for (auto& rec : records) {
    rep.beta_s.push_back(rec.beta_s);
    rep.beta_ns.push_back(rec.beta_ns);
    if (rec.beta_ns != rec.beta_s) ++rep.reassigned;
    const bool contributes = cfg.enable_low_reward_retention || rec.reward >= b;
    const double weight = (rec.reward - b) / cfg.k;
    if (!contributes || weight == 0.0) continue;
    ++rep.contributing;

    std::optional<Trace> second;
    if (rec.beta_ns != beta_avg) {
      auto dropout = cfg.substitution == SubstitutionMode::kRecomputeSharedMask
                         ? DropoutMasks<double>::replay(rec.sampling_pass.masks())
                         : DropoutMasks<double>::sampled(cfg.dropout, rng);
      second = teacher_forced(params, ctx, rec.beta_ns, rec.tokens, std::move(dropout));
    } else if (cfg.substitution == SubstitutionMode::kRecomputeSharedMask) {
      second = teacher_forced(params, ctx, beta_avg, rec.tokens, DropoutMasks<double>::replay(rec.sampling_pass.masks()));
      if (second->logprobs != rec.sampling_pass.logprobs) {
        throw ContractViolation("recomputed pass differs from the cached sampling pass");
      }
    }
    const Trace& used = (cfg.substitution == SubstitutionMode::kRecomputeSharedMask && second)
                            ? *second
                            : substitute_distributions(rec, beta_avg, second ? &*second : nullptr);
    rep.surrogate_loss -= weight * used.total();
    accumulate_gradient(params, used, weight, out.grad);
  }
  check_finite(out.grad, "self-annotated RL step");
  rep.grad_norm = std::sqrt(out.grad.squared_norm());
  out.records = std::move(records);
  return out;
}

ImageUpdate scst_gradient(const ImageContext& ctx, const RewardFn& reward, const Params& params, Rng& rng,
                          const TrainConfig& cfg) {
  if (!params.level_emb.isZero(0.0)) throw ContractViolation("self-critical baseline expects a zero level embedding");
  ImageUpdate out;
  out.grad = Gradients<double>::zeros(params.config);
  std::vector<double> rewards;
  for (int i = 0; i < cfg.k; ++i) {
    out.records.push_back(draw_sample(params, ctx, 0, rng, cfg.dropout, reward));
    rewards.push_back(out.records.back().reward);
  }
  const double b = mean_baseline(rewards);
  auto& rep = out.report;
  rep.baseline = b;
  rep.rewards = rewards;
  rep.mean_reward = std::accumulate(rewards.begin(), rewards.end(), 0.0) / cfg.k;
  for (const auto& rec : out.records) {
    rep.beta_s.push_back(0);
    rep.beta_ns.push_back(0);
    const double weight = (rec.reward - b) / cfg.k;
    if (weight == 0.0) continue;
    ++rep.contributing;
    rep.surrogate_loss -= weight * rec.sampling_pass.total();
    accumulate_gradient(params, rec.sampling_pass, weight, out.grad);
  }
  check_finite(out.grad, "self-critical step");
  rep.grad_norm = std::sqrt(out.grad.squared_norm());
  return out;
}

void Optimizer::step(Params& params, Gradients<double> grad) {
  if (cfg_.freeze_level_emb) grad.level_emb.setZero();
  if (cfg_.grad_clip > 0.0) {
    const double norm = std::sqrt(grad.squared_norm());
    if (norm > cfg_.grad_clip) {
      const double s = cfg_.grad_clip / norm;
      grad.for_each([s](const char*, std::span<double> g) {
        for (auto& v : g) v *= s;
      });
    }
  }
  std::vector<std::span<double>> p_spans, g_spans;
  params.for_each([&](const char*, std::span<double> s) { p_spans.push_back(s); });
  grad.for_each([&](const char*, std::span<double> s) { g_spans.push_back(s); });

  if (cfg_.optimizer == OptimizerKind::kSGD) {
    for (std::size_t i = 0; i < p_spans.size(); ++i) {
      for (std::size_t j = 0; j < p_spans[i].size(); ++j) p_spans[i][j] -= lr_ * g_spans[i][j];
    }
    return;
  }
  if (!m_) {
    m_ = Gradients<double>::zeros(params.config);
    v_ = Gradients<double>::zeros(params.config);
  }
  ++t_;
  std::vector<std::span<double>> m_spans, v_spans;
  m_->for_each([&](const char*, std::span<double> s) { m_spans.push_back(s); });
  v_->for_each([&](const char*, std::span<double> s) { v_spans.push_back(s); });
  const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < p_spans.size(); ++i) {
    for (std::size_t j = 0; j < p_spans[i].size(); ++j) {
      const double g = g_spans[i][j];
      double& m = m_spans[i][j];
      double& v = v_spans[i][j];
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g * g;
      p_spans[i][j] -= lr_ * (m / c1) / (std::sqrt(v / c2) + cfg_.adam_eps);
    }
  }
}

UpdateReport qsat_update(const ImageContext& ctx, const RewardFn& reward, Params& params, Rng& rng,
                         const TrainConfig& cfg, Optimizer& opt) {
  auto upd = self_annotated_gradient(ctx, reward, params, rng, cfg);
  opt.step(params, std::move(upd.grad));
  return upd.report;
}

UpdateReport sat_update(const ImageContext& ctx, const RewardFn& reward, Params& params, Rng& rng,
                        const TrainConfig& cfg, Optimizer& opt) {
  return qsat_update(ctx, reward, params, rng, cfg, opt);
}

UpdateReport scst_update(const ImageContext& ctx, const RewardFn& reward, Params& params, Rng& rng,
                         const TrainConfig& cfg, Optimizer& opt) {
  auto upd = scst_gradient(ctx, reward, params, rng, cfg);
  opt.step(params, std::move(upd.grad));
  return upd.report;
}

double xe_update(std::span<const XeExample> batch, Params& params, Rng& rng, const TrainConfig& cfg, Optimizer& opt) {
  auto grad = Gradients<double>::zeros(params.config);
  const double loss = xe_gradient(params, batch, cfg.dropout, rng, grad);
  opt.step(params, std::move(grad));
  return loss;
}

TrainConfig method_config(Method method, bool center_level, bool retain_low_reward, TrainConfig base) {
  base.method = method;
  switch (method) {
    case Method::kQSAT:
      base.enable_center_level = true;
      base.enable_low_reward_retention = true;
      break;
    case Method::kSAT:
      base.enable_center_level = center_level;
      base.enable_low_reward_retention = retain_low_reward;
      break;
    case Method::kSCST:
      base.enable_center_level = false;
      base.enable_low_reward_retention = false;
      base.freeze_level_emb = true;
      break;
    case Method::kXE:
      break;
  }
  return base;
}

std::vector<int> greedy_decode(const Params& params, const ImageContext& ctx, QualityLevel level) {
  Rng unused(0);
  return trace_tokens(sample_sequence(params, ctx, level, unused, DecodeMode::kGreedy));
}

MetricRow evaluate_model(const Params& params, const Dataset& ds, std::span<const RefSet> images,
                         QualityLevel level, const DfStats& stats, int workers) {
  struct Scores {
    double b1 = 0, b4 = 0, r = 0, c = 0;
  };
  std::vector<Scores> per(images.size());
  auto score_one = [&](std::size_t i) {
    const auto caption = ds.vocab.decode(greedy_decode(params, ds.context(images[i]), level));
    per[i] = {bleu_n(caption, images[i].refs, 1), bleu_n(caption, images[i].refs, 4),
              rouge_l(caption, images[i].refs), cider_d(caption, images[i].refs, stats)};
  };
  const std::size_t n_workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, images.size()));
  if (n_workers == 1) {
    for (std::size_t i = 0; i < images.size(); ++i) score_one(i);
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < n_workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t i = w; i < images.size(); i += n_workers) score_one(i);
      }));
    }
    for (auto& j : jobs) j.get();
  }
  MetricRow row;
  row.level = level;
  row.n_images = static_cast<int>(images.size());
  for (const auto& s : per) {
    row.bleu1 += s.b1;
    row.bleu4 += s.b4;
    row.rouge_l += s.r;
    row.cider += s.c;
  }
  if (!per.empty()) {
    const double n = static_cast<double>(per.size());
    row.bleu1 /= n;
    row.bleu4 /= n;
    row.rouge_l /= n;
    row.cider /= n;
  }
  return row;
}

std::vector<MetricRow> evaluate_sweep(const Params& params, const Dataset& ds, std::span<const RefSet> images,
                                      const DfStats& stats, int workers) {
  std::vector<MetricRow> rows;
  for (int level = 0; level < params.config.num_levels; ++level) {
    rows.push_back(evaluate_model(params, ds, images, level, stats, workers));
  }
  return rows;
}

std::string epoch_log_json(const EpochLog& log) {
  nlohmann::ordered_json j;
  j["epoch"] = log.epoch;
  j["phase"] = log.phase;
  j["loss"] = log.loss;
  j["mean_reward"] = log.mean_reward;
  j["mean_grad_norm"] = log.mean_grad_norm;
  j["reassigned"] = log.reassigned;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : log.val) {
    rows.push_back({{"level", r.level},
                    {"bleu1", r.bleu1},
                    {"bleu4", r.bleu4},
                    {"rouge_l", r.rouge_l},
                    {"cider", r.cider},
                    {"n_images", r.n_images}});
  }
  j["val"] = std::move(rows);
  return j.dump();
}

std::vector<XeExample> xe_examples(const Dataset& ds, const Annotation& annotation) {
  std::vector<XeExample> out;
  std::map<std::string, const RefSet*> by_id;
  for (const auto& r : ds.train) by_id[r.image_id] = &r;
  for (const auto& img : annotation.images) {
    auto it = by_id.find(img.image_id);
    const ImageContext ctx = it != by_id.end() ? ds.context(*it->second) : ds.context(RefSet{img.image_id, {}});
    for (const auto& c : img.captions) {
      XeExample ex{ctx, ds.vocab.encode(c.caption), c.level};
      out.push_back(std::move(ex));
    }
  }
  return out;
}

TrainResult train(const Dataset& ds, const TrainConfig& cfg, const ModelConfig& model_cfg,
                  std::optional<Params> warm_start, const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate(model_cfg.num_levels);
  TrainResult result;
  bool warm = warm_start.has_value();
  if (warm) {
    result.params = std::move(*warm_start);
    if (!(result.params.config == model_cfg)) throw ConfigError("warm-start checkpoint has a different model shape");
  } else {
    Rng init = derive_stream(cfg.seed, "init");
    result.params = Params::random(model_cfg, init);
  }
  auto& params = result.params;
  if (cfg.freeze_level_emb) params.level_emb.setZero();

  auto emit = [&](EpochLog log) {
    log.val = evaluate_sweep(params, ds, ds.val, ds.stats, cfg.workers);
    if (on_epoch) on_epoch(log);
    result.log.push_back(std::move(log));
  };

  const int xe_end = cfg.method == Method::kXE ? cfg.epochs : cfg.xe_epochs;
  if (!warm && xe_end > 0) {
    const auto annotation = annotate_dataset(ds.train, ds.stats, cfg.xe_table, cfg.self_inclusion, {}, cfg.workers);
    auto examples = xe_examples(ds, annotation);
    for (auto& ex : examples) {
      if (static_cast<int>(ex.tokens.size()) > model_cfg.max_len) ex.tokens.resize(model_cfg.max_len);
    }
    Rng rng = derive_stream(cfg.seed, "xe");
    Optimizer opt(cfg, cfg.xe_lr);
    for (int epoch = 0; epoch < xe_end; ++epoch) {
      std::shuffle(examples.begin(), examples.end(), rng);
      double loss = 0.0;
      int batches = 0;
      for (std::size_t i = 0; i < examples.size(); i += cfg.xe_batch_size) {
        const auto n = std::min<std::size_t>(cfg.xe_batch_size, examples.size() - i);
        loss += xe_update(std::span(examples).subspan(i, n), params, rng, cfg, opt);
        ++batches;
      }
      EpochLog log;
      log.epoch = epoch;
      log.phase = "xe";
      log.loss = batches ? loss / batches : 0.0;
      emit(std::move(log));
    }
  }

  Rng rng = derive_stream(cfg.seed, "rl");
  if (cfg.method != Method::kXE) {
    const auto make_reward = cider_reward(ds.stats, ds.vocab);
    std::vector<std::size_t> order(ds.train.size());
    std::iota(order.begin(), order.end(), 0);
    Optimizer opt(cfg, cfg.rl_lr);
    for (int epoch = cfg.xe_epochs; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      EpochLog log;
      log.epoch = epoch;
      log.phase = to_string(cfg.method);
      double reward_sum = 0.0, loss_sum = 0.0, norm_sum = 0.0;
      for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
        const auto n = std::min<std::size_t>(cfg.batch_size, order.size() - i);
        auto grad = Gradients<double>::zeros(params.config);
        for (std::size_t j = 0; j < n; ++j) {
          const RefSet& image = ds.train[order[i + j]];
          const auto reward = make_reward(image);
          const auto ctx = ds.context(image);
          auto upd = cfg.method == Method::kSCST ? scst_gradient(ctx, reward, params, rng, cfg)
                                                 : self_annotated_gradient(ctx, reward, params, rng, cfg);
          add_scaled(grad, upd.grad, 1.0 / static_cast<double>(n));
          reward_sum += upd.report.mean_reward;
          loss_sum += upd.report.surrogate_loss;
          norm_sum += upd.report.grad_norm;
          log.reassigned += upd.report.reassigned;
        }
        opt.step(params, std::move(grad));
      }
      const double n_images = static_cast<double>(order.size());
      log.mean_reward = reward_sum / n_images;
      log.loss = loss_sum / n_images;
      log.mean_grad_norm = norm_sum / n_images;
      if (!params.all_finite()) throw NumericalError("parameters became non-finite at epoch " + std::to_string(epoch));
      emit(std::move(log));
    }
  }
  std::ostringstream os;
  os << rng;
  result.rng_state = os.str();
  return result;
}

}  // namespace qcap
