#pragma once

// Controllable captioner: a single GRU cell conditioned on an image feature
// (through the initial hidden state) and on a quality level (through the
// input embedding). The input at every step is
//
//     x_t = level_emb[beta] + word_emb[y_{t-1}] (+ pos_emb[t] if positional)
//
// Everything is templated on the scalar type; the library instantiates double.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qcap/errors.hpp"
#include "qcap/metrics.hpp"

namespace qcap {

using Rng = std::mt19937_64;

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSentinels = 4;

  Vocab() : Vocab(std::vector<Token>{}) {}
  explicit Vocab(const std::vector<Token>& words) {
    tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (int i = 0; i < kNumSentinels; ++i) index_.emplace(tokens_[i], i);
    for (const auto& w : words) {
      if (index_.contains(w)) continue;
      index_.emplace(w, static_cast<int>(tokens_.size()));
      tokens_.push_back(w);
    }
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<Token>& tokens() const { return tokens_; }
  bool contains(const Token& t) const { return index_.contains(t); }

  int id(const Token& t) const {
    auto it = index_.find(t);
    if (it == index_.end()) throw UnknownToken("token not in vocabulary: '" + t + "'");
    return it->second;
  }
  int id_or_unk(const Token& t) const {
    auto it = index_.find(t);
    return it == index_.end() ? kUnk : it->second;
  }
  const Token& token(int id) const {
    if (id < 0 || id >= size()) throw IndexError("token id out of range: " + std::to_string(id));
    return tokens_[id];
  }

  std::vector<int> encode(std::span<const Token> caption) const {
    std::vector<int> ids;
    ids.reserve(caption.size());
    for (const auto& t : caption) ids.push_back(id(t));
    return ids;
  }
  Caption decode(std::span<const int> ids) const {
    Caption c;
    for (int i : ids) {
      if (i == kEos) break;
      if (i == kPad || i == kBos) continue;
      c.push_back(token(i));
    }
    return c;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<Token> tokens_;
  std::unordered_map<Token, int> index_;
};

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int num_levels = 3;
  int max_len = 20;
  int feature_dim = 64;
  // The positional term of the input sum is optional; a recurrent decoder
  // already knows the position, so it is off by default.
  bool positional = false;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ImageContext {
  std::string image_id;
  Eigen::VectorXd feature;
};

template <typename Scalar>
struct PolicyParams {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  ModelConfig config;
  Matrix word_emb;   // V x d
  Matrix level_emb;  // L x d
  Matrix pos_emb;    // max_len x d
  Matrix img_w;      // d x feature_dim
  Vector img_b;      // d
  Matrix w_x;        // 3d x d, gate blocks: update, reset, candidate
  Matrix w_h;        // 3d x d
  Vector b_x;        // 3d
  Vector b_h;        // 3d
  Matrix out_w;      // d x V
  Vector out_b;      // V

  static PolicyParams zeros(const ModelConfig& cfg) {
    if (cfg.vocab_size <= Vocab::kNumSentinels || cfg.d_model <= 0 || cfg.num_levels <= 0 || cfg.max_len <= 0 ||
        cfg.feature_dim <= 0) {
      throw ConfigError("invalid model configuration");
    }
    const int d = cfg.d_model;
    PolicyParams p;
    p.config = cfg;
    p.word_emb = Matrix::Zero(cfg.vocab_size, d);
    p.level_emb = Matrix::Zero(cfg.num_levels, d);
    p.pos_emb = Matrix::Zero(cfg.max_len, d);
    p.img_w = Matrix::Zero(d, cfg.feature_dim);
    p.img_b = Vector::Zero(d);
    p.w_x = Matrix::Zero(3 * d, d);
    p.w_h = Matrix::Zero(3 * d, d);
    p.b_x = Vector::Zero(3 * d);
    p.b_h = Vector::Zero(3 * d);
    p.out_w = Matrix::Zero(d, cfg.vocab_size);
    p.out_b = Vector::Zero(cfg.vocab_size);
    return p;
  }

  // uniform(-scale, scale) everywhere
  static PolicyParams random(const ModelConfig& cfg, Rng& rng, double scale = 0.1) {
    PolicyParams p = zeros(cfg);
    std::uniform_real_distribution<double> dist(-scale, scale);
    p.for_each([&](const char*, std::span<Scalar> values) {
      for (auto& v : values) v = static_cast<Scalar>(dist(rng));
    });
    return p;
  }

  // Visits every tensor as a flat span, in a fixed order.
  template <class F>
  void for_each(F&& f) {
    f("word_emb", span_of(word_emb));
    f("level_emb", span_of(level_emb));
    f("pos_emb", span_of(pos_emb));
    f("img_w", span_of(img_w));
    f("img_b", span_of(img_b));
    f("w_x", span_of(w_x));
    f("w_h", span_of(w_h));
    f("b_x", span_of(b_x));
    f("b_h", span_of(b_h));
    f("out_w", span_of(out_w));
    f("out_b", span_of(out_b));
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<PolicyParams*>(this)->for_each([&](const char* name, std::span<Scalar> s) {
      f(name, std::span<const Scalar>(s.data(), s.size()));
    });
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for_each([&](const char*, std::span<const Scalar> s) { n += s.size(); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const char*, std::span<const Scalar> s) {
      for (auto v : s) ok = ok && std::isfinite(static_cast<double>(v));
    });
    return ok;
  }

  Scalar squared_norm() const {
    Scalar acc = 0;
    for_each([&](const char*, std::span<const Scalar> s) {
      for (auto v : s) acc += v * v;
    });
    return acc;
  }

  void set_zero() {
    for_each([](const char*, std::span<Scalar> s) { std::fill(s.begin(), s.end(), Scalar(0)); });
  }

  // Bitwise comparison of every entry (and the config).
  friend bool operator==(const PolicyParams& a, const PolicyParams& b) {
    if (!(a.config == b.config)) return false;
    std::vector<std::span<const Scalar>> lhs, rhs;
    a.for_each([&](const char*, std::span<const Scalar> s) { lhs.push_back(s); });
    b.for_each([&](const char*, std::span<const Scalar> s) { rhs.push_back(s); });
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      if (lhs[i].size() != rhs[i].size()) return false;
      if (!std::equal(lhs[i].begin(), lhs[i].end(), rhs[i].begin(), [](Scalar x, Scalar y) {
            return std::memcmp(&x, &y, sizeof(Scalar)) == 0;
          })) {
        return false;
      }
    }
    return true;
  }

 private:
  template <class M>
  static std::span<Scalar> span_of(M& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
  }
};

template <typename Scalar>
using Gradients = PolicyParams<Scalar>;

/// Dropout on the decoder output. Off, fresh Bernoulli masks drawn from an
/// rng, or replay of previously drawn masks. Masks are already scaled by
/// 1/(1-rate); an empty vector means identity.
template <typename Scalar>
class DropoutMasks {
 public:
  using Vector = typename PolicyParams<Scalar>::Vector;

  static DropoutMasks off() { return DropoutMasks(); }
  static DropoutMasks sampled(double rate, Rng& rng) {
    DropoutMasks m;
    if (rate > 0.0) {
      m.rate_ = rate;
      m.rng_ = &rng;
    }
    return m;
  }
  static DropoutMasks replay(std::vector<Vector> masks) {
    DropoutMasks m;
    m.replay_ = std::move(masks);
    m.replaying_ = true;
    return m;
  }

  Vector next(int dim) {
    if (replaying_) {
      if (cursor_ >= replay_.size()) throw ContractViolation("dropout replay ran out of masks");
      return replay_[cursor_++];
    }
    if (!rng_) return Vector();
    std::bernoulli_distribution keep(1.0 - rate_);
    Vector mask(dim);
    const Scalar scale = Scalar(1.0 / (1.0 - rate_));
    for (int i = 0; i < dim; ++i) mask[i] = keep(*rng_) ? scale : Scalar(0);
    return mask;
  }

 private:
  double rate_ = 0.0;
  Rng* rng_ = nullptr;
  std::vector<Vector> replay_;
  std::size_t cursor_ = 0;
  bool replaying_ = false;
};

template <typename Scalar>
struct StepCache {
  using Vector = typename PolicyParams<Scalar>::Vector;
  int input_token = 0;
  int position = 0;
  Vector x;       // fused input embedding
  Vector h_prev;
  Vector gx;      // w_x x + b_x
  Vector gh;      // w_h h_prev + b_h
  Vector z, r, n;
  Vector h;
  Vector mask;    // empty = no dropout
  Vector logits;
  Vector logp;    // log-probabilities over the vocabulary
};

/// One teacher-forced or sampled pass over a sequence.
template <typename Scalar>
struct SequenceTrace {
  using Vector = typename PolicyParams<Scalar>::Vector;
  int beta = 0;
  Vector feature;
  Vector h0;
  std::vector<int> targets;      // tokens predicted at each step (EOS included when emitted)
  std::vector<StepCache<Scalar>> steps;
  std::vector<Scalar> logprobs;  // log p(targets[t]) per step

  Scalar total() const {
    Scalar s = 0;
    for (auto v : logprobs) s += v;
    return s;
  }
  std::vector<typename PolicyParams<Scalar>::Vector> masks() const {
    std::vector<Vector> out;
    for (const auto& s : steps) out.push_back(s.mask);
    return out;
  }
};

struct StepDistribution {
  Eigen::VectorXd logits;
  Eigen::VectorXd logprobs;
};

namespace detail {

template <typename V>
V sigmoid(const V& a) {
  return (1.0 + (-a.array()).exp()).inverse().matrix();
}

inline bool output_masked(int id) { return id == Vocab::kPad || id == Vocab::kBos; }

template <typename Scalar>
void check_level(const PolicyParams<Scalar>& p, int beta) {
  if (beta < 0 || beta >= p.config.num_levels) throw IndexError("quality level out of range: " + std::to_string(beta));
}

template <typename Scalar>
void check_token(const PolicyParams<Scalar>& p, int y) {
  if (y < 0 || y >= p.config.vocab_size) throw IndexError("token id out of range: " + std::to_string(y));
}

}  // namespace detail

template <typename Scalar>
typename PolicyParams<Scalar>::Vector embed_input(int token, int beta, int position, const PolicyParams<Scalar>& p) {
  detail::check_token(p, token);
  detail::check_level(p, beta);
  if (position < 0 || position >= p.config.max_len) {
    throw IndexError("position out of range: " + std::to_string(position));
  }
  typename PolicyParams<Scalar>::Vector x = p.level_emb.row(beta).transpose() + p.word_emb.row(token).transpose();
  if (p.config.positional) x += p.pos_emb.row(position).transpose();
  return x;
}

template <typename Scalar>
typename PolicyParams<Scalar>::Vector initial_state(const PolicyParams<Scalar>& p,
                                                   const typename PolicyParams<Scalar>::Vector& feature) {
  if (feature.size() != p.config.feature_dim) throw IndexError("image feature has wrong dimension");
  return (p.img_w * feature + p.img_b).array().tanh().matrix();
}

/// Advances the GRU by one step and fills `cache` (including log-probs).
template <typename Scalar>
void step_forward(const PolicyParams<Scalar>& p, const typename PolicyParams<Scalar>::Vector& h_prev, int token,
                  int beta, int position, DropoutMasks<Scalar>& dropout, StepCache<Scalar>& cache) {
  using Vector = typename PolicyParams<Scalar>::Vector;
  const int d = p.config.d_model;
  cache.input_token = token;
  cache.position = position;
  cache.x = embed_input(token, beta, position, p);
  cache.h_prev = h_prev;
  cache.gx = p.w_x * cache.x + p.b_x;
  cache.gh = p.w_h * h_prev + p.b_h;
  cache.z = detail::sigmoid<Vector>(cache.gx.head(d) + cache.gh.head(d));
  cache.r = detail::sigmoid<Vector>(cache.gx.segment(d, d) + cache.gh.segment(d, d));
  cache.n = (cache.gx.tail(d) + cache.r.cwiseProduct(cache.gh.tail(d))).array().tanh().matrix();
  cache.h = (Vector::Ones(d) - cache.z).cwiseProduct(cache.n) + cache.z.cwiseProduct(h_prev);
  cache.mask = dropout.next(d);
  Vector logits = cache.mask.size() ? Vector(p.out_w.transpose() * cache.h.cwiseProduct(cache.mask) + p.out_b)
                                    : Vector(p.out_w.transpose() * cache.h + p.out_b);
  logits[Vocab::kPad] = -std::numeric_limits<Scalar>::infinity();
  logits[Vocab::kBos] = -std::numeric_limits<Scalar>::infinity();
  const Scalar mx = logits.maxCoeff();
  const Scalar lse = mx + std::log((logits.array() - mx).exp().sum());
  cache.logp = (logits.array() - lse).matrix();
  cache.logits = std::move(logits);
}

/// Teacher-forced pass: predicts each token of `target` then EOS (EOS is
/// omitted when the target already fills max_len).
template <typename Scalar>
SequenceTrace<Scalar> teacher_forced(const PolicyParams<Scalar>& p, const ImageContext& ctx, int beta,
                                     std::span<const int> target, DropoutMasks<Scalar> dropout) {
  const int max_len = p.config.max_len;
  if (static_cast<int>(target.size()) > max_len) throw LengthError("target longer than max_len");
  detail::check_level(p, beta);
  for (int y : target) detail::check_token(p, y);
  SequenceTrace<Scalar> trace;
  trace.beta = beta;
  trace.feature = ctx.feature.template cast<Scalar>();
  trace.h0 = initial_state(p, trace.feature);
  trace.targets.assign(target.begin(), target.end());
  if (static_cast<int>(target.size()) < max_len) trace.targets.push_back(Vocab::kEos);
  trace.steps.resize(trace.targets.size());
  auto h = trace.h0;
  int prev = Vocab::kBos;
  for (std::size_t t = 0; t < trace.targets.size(); ++t) {
    step_forward(p, h, prev, beta, static_cast<int>(t), dropout, trace.steps[t]);
    trace.logprobs.push_back(trace.steps[t].logp[trace.targets[t]]);
    h = trace.steps[t].h;
    prev = trace.targets[t];
  }
  return trace;
}

template <typename Scalar>
SequenceTrace<Scalar> teacher_forced(const PolicyParams<Scalar>& p, const ImageContext& ctx, int beta,
                                     std::span<const int> target) {
  return teacher_forced(p, ctx, beta, target, DropoutMasks<Scalar>::off());
}

/// Distribution over the next token after `prefix` (which must start with BOS).
template <typename Scalar>
StepDistribution forward_step(const PolicyParams<Scalar>& p, const ImageContext& ctx, int beta,
                              std::span<const int> prefix) {
  if (prefix.empty() || prefix.front() != Vocab::kBos) throw ContractViolation("prefix must start with BOS");
  if (static_cast<int>(prefix.size()) > p.config.max_len) throw LengthError("prefix reaches max_len");
  detail::check_level(p, beta);
  auto dropout = DropoutMasks<Scalar>::off();
  auto h = initial_state(p, typename PolicyParams<Scalar>::Vector(ctx.feature.template cast<Scalar>()));
  StepCache<Scalar> cache;
  for (std::size_t t = 0; t < prefix.size(); ++t) {
    step_forward(p, h, prefix[t], beta, static_cast<int>(t), dropout, cache);
    h = cache.h;
  }
  StepDistribution out;
  out.logprobs = cache.logp.template cast<double>();
  out.logits = cache.logits.template cast<double>();
  return out;
}

enum class DecodeMode { kSample, kGreedy };

/// Ancestral sampling (or greedy decoding) until EOS or max_len tokens. The
/// trace keeps the stepwise log-probs and dropout masks of the pass so the
/// same distributions can be reused or recomputed later.
template <typename Scalar>
SequenceTrace<Scalar> sample_sequence(const PolicyParams<Scalar>& p, const ImageContext& ctx, int beta, Rng& rng,
                                      DecodeMode mode = DecodeMode::kSample,
                                      DropoutMasks<Scalar> dropout = DropoutMasks<Scalar>::off(), int max_len = -1) {
  if (max_len < 0 || max_len > p.config.max_len) max_len = p.config.max_len;
  detail::check_level(p, beta);
  SequenceTrace<Scalar> trace;
  trace.beta = beta;
  trace.feature = ctx.feature.template cast<Scalar>();
  trace.h0 = initial_state(p, trace.feature);
  auto h = trace.h0;
  int prev = Vocab::kBos;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int t = 0; t < max_len; ++t) {
    trace.steps.emplace_back();
    auto& cache = trace.steps.back();
    step_forward(p, h, prev, beta, t, dropout, cache);
    int next = 0;
    if (mode == DecodeMode::kGreedy) {
      cache.logp.maxCoeff(&next);
    } else {
      const double u = unif(rng);
      double acc = 0.0;
      next = -1;
      int last_valid = 0;
      for (int v = 0; v < cache.logp.size(); ++v) {
        if (detail::output_masked(v)) continue;
        last_valid = v;
        acc += std::exp(static_cast<double>(cache.logp[v]));
        if (u < acc) {
          next = v;
          break;
        }
      }
      if (next < 0) next = last_valid;  // rounding in the cumulative sum
    }
    trace.targets.push_back(next);
    trace.logprobs.push_back(cache.logp[next]);
    h = cache.h;
    prev = next;
    if (next == Vocab::kEos) break;
  }
  return trace;
}

/// Tokens of a sampled trace without the trailing EOS.
template <typename Scalar>
std::vector<int> trace_tokens(const SequenceTrace<Scalar>& trace) {
  std::vector<int> out(trace.targets.begin(), trace.targets.end());
  if (!out.empty() && out.back() == Vocab::kEos) out.pop_back();
  return out;
}

/// Accumulates into `grad` the gradient of  -sum_t weight * log p(targets[t])
/// for a recorded pass. Level-embedding rows are included; callers freeze
/// them by zeroing afterwards.
template <typename Scalar>
void accumulate_gradient(const PolicyParams<Scalar>& p, const SequenceTrace<Scalar>& trace, Scalar weight,
                         Gradients<Scalar>& grad) {
  using Vector = typename PolicyParams<Scalar>::Vector;
  const int d = p.config.d_model;
  Vector dh_next = Vector::Zero(d);
  for (int t = static_cast<int>(trace.steps.size()) - 1; t >= 0; --t) {
    const auto& c = trace.steps[t];
    Vector dlogits = c.logp.array().exp().matrix() * weight;
    dlogits[trace.targets[t]] -= weight;
    dlogits[Vocab::kPad] = 0;
    dlogits[Vocab::kBos] = 0;

    const Vector o = c.mask.size() ? Vector(c.h.cwiseProduct(c.mask)) : c.h;
    grad.out_b += dlogits;
    grad.out_w.noalias() += o * dlogits.transpose();
    Vector dh = p.out_w * dlogits;
    if (c.mask.size()) dh = dh.cwiseProduct(c.mask);
    dh += dh_next;

    const Vector dn = dh.cwiseProduct(Vector::Ones(d) - c.z);
    const Vector dz = dh.cwiseProduct(c.h_prev - c.n);
    Vector dh_prev = dh.cwiseProduct(c.z);
    const Vector da_n = dn.cwiseProduct((Vector::Ones(d) - c.n.cwiseAbs2()));
    const Vector dr = da_n.cwiseProduct(c.gh.tail(d));
    const Vector da_z = dz.cwiseProduct(c.z.cwiseProduct(Vector::Ones(d) - c.z));
    const Vector da_r = dr.cwiseProduct(c.r.cwiseProduct(Vector::Ones(d) - c.r));

    Vector dgx(3 * d), dgh(3 * d);
    dgx << da_z, da_r, da_n;
    dgh << da_z, da_r, da_n.cwiseProduct(c.r);

    grad.w_x.noalias() += dgx * c.x.transpose();
    grad.b_x += dgx;
    grad.w_h.noalias() += dgh * c.h_prev.transpose();
    grad.b_h += dgh;

    const Vector dx = p.w_x.transpose() * dgx;
    dh_prev.noalias() += p.w_h.transpose() * dgh;

    grad.word_emb.row(c.input_token) += dx.transpose();
    grad.level_emb.row(trace.beta) += dx.transpose();
    if (p.config.positional) grad.pos_emb.row(c.position) += dx.transpose();
    dh_next = dh_prev;
  }
  const Vector da0 = dh_next.cwiseProduct(Vector::Ones(d) - trace.h0.cwiseAbs2());
  grad.img_w.noalias() += da0 * trace.feature.transpose();
  grad.img_b += da0;
}

}  // namespace qcap
