#pragma once

// Trainers for the controllable captioner: teacher-forced cross-entropy,
// self-critical RL without levels, self-annotated RL and its
// quality-oriented extension (center-level estimation plus retention of
// below-baseline samples), and fixed-level evaluation.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qcap/data.hpp"
#include "qcap/model.hpp"
#include "qcap/quality.hpp"

namespace qcap {

using Params = PolicyParams<double>;
using Trace = SequenceTrace<double>;

enum class Method { kXE, kSCST, kSAT, kQSAT };
enum class OptimizerKind { kSGD, kAdam };

// How the loss distribution is obtained for a sample whose reassigned level
// equals the level it was sampled at.
//  kCacheReuse: reuse the sampling pass (log-probs and activations).
//  kRecomputeSharedMask: re-run the teacher-forced pass replaying the
//    sampling pass's dropout masks (also used for the fresh pass when the
//    levels differ).
enum class SubstitutionMode { kCacheReuse, kRecomputeSharedMask };

std::string to_string(Method m);
Method method_from_string(std::string_view s);

struct TrainConfig {
  Method method = Method::kQSAT;
  int k = 5;                 // samples per image
  int xe_epochs = 10;        // M: epochs [0, M) are cross-entropy
  int epochs = 20;           // N
  double xe_lr = 2e-3;
  double rl_lr = 5e-4;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;    // global-norm clip, 0 = off
  bool enable_center_level = true;
  bool enable_low_reward_retention = true;
  ThresholdTable xe_table = ThresholdTable::xe_default();
  ThresholdTable rl_table = ThresholdTable::rl_default();
  bool self_inclusion = true;  // reference convention for XE annotation
  std::uint64_t seed = 1;
  double dropout = 0.1;
  int batch_size = 8;        // images per RL step
  int xe_batch_size = 32;    // captions per XE step
  bool freeze_level_emb = false;
  SubstitutionMode substitution = SubstitutionMode::kCacheReuse;
  int workers = 1;

  // Throws ConfigError on inconsistent settings.
  void validate(int num_levels) const;
};

// Fresh generator for a named subsystem of the run seed. Streams in use:
// "init" (parameters), "xe" (batch order, dropout), "rl" (image order,
// levels, sampling, dropout).
Rng derive_stream(std::uint64_t seed, std::string_view name);

// Reward of a decoded token sequence against one image's references.
using RewardFn = std::function<double(std::span<const int> tokens)>;
using RewardFactory = std::function<RewardFn(const RefSet& refs)>;

RewardFactory cider_reward(const DfStats& stats, const Vocab& vocab);

struct SampleRecord {
  std::vector<int> tokens;  // without EOS
  Trace sampling_pass;      // cached stepwise log-probs, activations, dropout masks
  bool cached = false;
  double reward = 0.0;
  QualityLevel beta_init = 0;
  QualityLevel beta_s = 0;
  QualityLevel beta_ns = 0;

  const std::vector<double>& cached_logprobs() const { return sampling_pass.logprobs; }
};

struct UpdateReport {
  double baseline = 0.0;
  double mean_reward = 0.0;
  double grad_norm = 0.0;
  double surrogate_loss = 0.0;
  int reassigned = 0;        // samples with beta_ns != beta_s
  int contributing = 0;      // samples entering the gradient
  QualityLevel beta_avg = 0;
  double center_score = 0.0; // S_avg of the center-level samples
  std::vector<double> rewards;
  std::vector<QualityLevel> beta_s;
  std::vector<QualityLevel> beta_ns;
};

// Baseline b: the mean reward, evaluated as r_0 + mean(r_i - r_0) so that
// equal rewards give b == r exactly.
double mean_baseline(std::span<const double> rewards);

/// Cross-entropy over a batch of annotated captions, each conditioned on its
/// own level. Returns the batch loss (mean per-caption NLL) before the step.
struct XeExample {
  ImageContext ctx;
  std::vector<int> tokens;
  QualityLevel level = 0;
};
double xe_loss(const Params& params, std::span<const XeExample> batch);
double xe_gradient(const Params& params, std::span<const XeExample> batch, double dropout, Rng& rng,
                   Gradients<double>& grad);

struct CenterLevel {
  QualityLevel beta_avg = 0;
  double mean_score = 0.0;
  std::vector<SampleRecord> discarded;
};

CenterLevel compute_center_level(const ImageContext& ctx, const RewardFn& reward, const Params& params, Rng& rng,
                                 const TrainConfig& cfg);

std::vector<SampleRecord> reassign_levels(std::vector<SampleRecord> records, double baseline, QualityLevel beta_avg);

/// The pass whose log-probs enter the loss: the cached sampling pass when
/// beta_avg == beta_ns, otherwise `second_pass` (teacher-forced at beta_ns).
const Trace& substitute_distributions(const SampleRecord& record, QualityLevel beta_avg, const Trace* second_pass);

struct ImageUpdate {
  UpdateReport report;
  Gradients<double> grad;
  std::vector<SampleRecord> records;
};

// Per-image gradient of the surrogate -(1/k) sum_i (r_i - b) log p'_i.
ImageUpdate self_annotated_gradient(const ImageContext& ctx, const RewardFn& reward, const Params& params, Rng& rng,
                                    const TrainConfig& cfg);
ImageUpdate scst_gradient(const ImageContext& ctx, const RewardFn& reward, const Params& params, Rng& rng,
                          const TrainConfig& cfg);

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, double lr) : cfg_(cfg), lr_(lr) {}
  // Applies one update in place. Level-embedding gradients are dropped when
  // the config freezes them.
  void step(Params& params, Gradients<double> grad);

 private:
  TrainConfig cfg_;
  double lr_;
  std::optional<Gradients<double>> m_, v_;
  long t_ = 0;
};

// Single-image updates: gradient followed by one optimizer step.
UpdateReport qsat_update(const ImageContext& ctx, const RewardFn& reward, Params& params, Rng& rng,
                         const TrainConfig& cfg, Optimizer& opt);
UpdateReport sat_update(const ImageContext& ctx, const RewardFn& reward, Params& params, Rng& rng,
                        const TrainConfig& cfg, Optimizer& opt);
UpdateReport scst_update(const ImageContext& ctx, const RewardFn& reward, Params& params, Rng& rng,
                         const TrainConfig& cfg, Optimizer& opt);
double xe_update(std::span<const XeExample> batch, Params& params, Rng& rng, const TrainConfig& cfg, Optimizer& opt);

// Config for a method/ablation row: sat with no flags is plain SAT, each
// flag adds one of the two quality-oriented steps; qsat turns both on.
TrainConfig method_config(Method method, bool center_level, bool retain_low_reward, TrainConfig base = {});

struct MetricRow {
  QualityLevel level = 0;
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  int n_images = 0;
};

// Greedy decode at a fixed level for every image; metrics against all
// references, averaged over images.
MetricRow evaluate_model(const Params& params, const Dataset& ds, std::span<const RefSet> images,
                         QualityLevel level, const DfStats& stats, int workers = 1);
std::vector<MetricRow> evaluate_sweep(const Params& params, const Dataset& ds, std::span<const RefSet> images,
                                      const DfStats& stats, int workers = 1);

std::vector<int> greedy_decode(const Params& params, const ImageContext& ctx, QualityLevel level);

struct EpochLog {
  int epoch = 0;
  std::string phase;  // "xe" or the RL method
  double loss = 0.0;
  double mean_reward = 0.0;
  double mean_grad_norm = 0.0;
  int reassigned = 0;
  std::vector<MetricRow> val;
};

std::string epoch_log_json(const EpochLog& log);

struct TrainResult {
  Params params;
  std::vector<EpochLog> log;
  std::string rng_state;  // "rl" stream after the last epoch
};

// Runs epochs [0, M) cross-entropy and [M, N) of the configured method. With
// a warm start only the RL range runs (or nothing more for XE).
TrainResult train(const Dataset& ds, const TrainConfig& cfg, const ModelConfig& model_cfg,
                  std::optional<Params> warm_start = std::nullopt,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

std::vector<XeExample> xe_examples(const Dataset& ds, const Annotation& annotation);

}  // namespace qcap
