#pragma once

// Caption metrics: tokenization, n-gram statistics, CIDEr-D, BLEU-n and
// ROUGE-L. All scoring functions are pure; DfStats is immutable once built
// and may be shared between threads.

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace qcap {

using Token = std::string;
using Caption = std::vector<Token>;

struct RefSet {
  std::string image_id;
  std::vector<Caption> refs;
};

// Lowercases ASCII letters, drops ASCII punctuation and splits on
// whitespace. Throws EmptyCaption when nothing survives.
Caption tokenize(std::string_view text);

// N-grams are keyed by their tokens joined with a single space; tokens never
// contain whitespace so the key is unambiguous.
using NGram = std::string;
using NGramCounts = std::unordered_map<NGram, int>;

NGramCounts ngram_counts(std::span<const Token> caption, int n);

// Counts of all 1..max_n grams in one map.
NGramCounts ngram_counts_upto(std::span<const Token> caption, int max_n);

/// Corpus document frequencies: df(g) is the number of images whose
/// reference set contains g at least once.
class DfStats {
 public:
  DfStats() = default;

  static DfStats build(std::span<const RefSet> corpus, int max_n = 4);

  int n_images() const { return n_images_; }
  int df(const NGram& gram) const;
  std::size_t size() const { return df_.size(); }
  const std::unordered_map<NGram, int>& table() const { return df_; }

  /// log(N / max(1, df(g))). Absent grams get log N.
  double idf(const NGram& gram) const;

 private:
  int n_images_ = 0;
  std::unordered_map<NGram, int> df_;
};

inline DfStats build_df_stats(std::span<const RefSet> corpus) { return DfStats::build(corpus); }

enum class CiderVariant {
  kCiderD,  // clipped tf-idf, gaussian length penalty
  kCider,   // plain cosine, no penalty
};

struct CiderOptions {
  CiderVariant variant = CiderVariant::kCiderD;
  double sigma = 6.0;
  int max_n = 4;
};

/// Reference side of CIDEr, pre-vectorised so a fixed reference set can be
/// scored against many candidates (RL rewards, quality annotation).
class CiderScorer {
 public:
  CiderScorer(const DfStats& stats, std::span<const Caption> refs, CiderOptions options = {});

  double score(std::span<const Token> candidate) const;
  std::size_t num_refs() const { return refs_.size(); }

 private:
  struct Vec {
    // one tf-idf map per order
    std::vector<std::unordered_map<NGram, double>> grams;
    std::vector<double> norms;
    double length = 0.0;
  };
  Vec vectorise(std::span<const Token> caption) const;
  double similarity(const Vec& cand, const Vec& ref, int order) const;

  const DfStats* stats_;
  CiderOptions options_;
  std::vector<Vec> refs_;
};

double cider_d(std::span<const Token> candidate, std::span<const Caption> refs, const DfStats& stats,
               CiderOptions options = {});
inline double cider_d(std::span<const Token> candidate, const RefSet& refs, const DfStats& stats,
                      CiderOptions options = {}) {
  return cider_d(candidate, refs.refs, stats, options);
}

// Sentence BLEU over orders 1..n: geometric mean of clipped precisions times
// brevity penalty exp(1 - r/c), r the closest reference length (shorter on
// ties). Zero precisions are floored at `epsilon`. Orders for which the
// candidate has no n-grams at all (c < m) are left out of the mean.
double bleu_n(std::span<const Token> candidate, std::span<const Caption> refs, int n,
              double epsilon = 1e-9);
inline double bleu_n(std::span<const Token> candidate, const RefSet& refs, int n,
                     double epsilon = 1e-9) {
  return bleu_n(candidate, refs.refs, n, epsilon);
}

std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b);

// LCS F-measure (1 + b2) P R / (R + b2 P), maximised over references.
double rouge_l(std::span<const Token> candidate, std::span<const Caption> refs, double beta_sq = 1.2);
inline double rouge_l(std::span<const Token> candidate, const RefSet& refs, double beta_sq = 1.2) {
  return rouge_l(candidate, refs.refs, beta_sq);
}

std::string join_tokens(std::span<const Token> caption);

}  // namespace qcap
