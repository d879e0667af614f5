#include "qcap/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "qcap/errors.hpp"

namespace qcap {

Caption tokenize(std::string_view text) {
  Caption out;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  if (out.empty()) throw EmptyCaption("caption is empty after normalization: '" + std::string(text) + "'");
  return out;
}

std::string join_tokens(std::span<const Token> caption) {
  std::string s;
  for (std::size_t i = 0; i < caption.size(); ++i) {
    if (i) s.push_back(' ');
    s += caption[i];
  }
  return s;
}

NGramCounts ngram_counts(std::span<const Token> caption, int n) {
  NGramCounts counts;
  if (n < 1) return counts;
  const auto len = static_cast<int>(caption.size());
  for (int i = 0; i + n <= len; ++i) ++counts[join_tokens(caption.subspan(i, n))];
  return counts;
}

NGramCounts ngram_counts_upto(std::span<const Token> caption, int max_n) {
  NGramCounts counts;
  for (int n = 1; n <= max_n; ++n) {
    for (auto& [g, c] : ngram_counts(caption, n)) counts[g] += c;
  }
  return counts;
}

DfStats DfStats::build(std::span<const RefSet> corpus, int max_n) {
  DfStats stats;
  stats.n_images_ = static_cast<int>(corpus.size());
  for (const auto& image : corpus) {
    std::set<NGram> seen;
    for (const auto& ref : image.refs) {
      for (const auto& entry : ngram_counts_upto(ref, max_n)) seen.insert(entry.first);
    }
    for (const auto& g : seen) ++stats.df_[g];
  }
  return stats;
}

int DfStats::df(const NGram& gram) const {
  auto it = df_.find(gram);
  return it == df_.end() ? 0 : it->second;
}

double DfStats::idf(const NGram& gram) const {
  const double df_clamped = std::max(1, df(gram));
  return std::log(static_cast<double>(n_images_) / df_clamped);
}

CiderScorer::CiderScorer(const DfStats& stats, std::span<const Caption> refs, CiderOptions options)
    : stats_(&stats), options_(options) {
  refs_.reserve(refs.size());
  for (const auto& r : refs) refs_.push_back(vectorise(r));
}

CiderScorer::Vec CiderScorer::vectorise(std::span<const Token> caption) const {
  Vec v;
  v.grams.resize(options_.max_n);
  v.norms.assign(options_.max_n, 0.0);
  v.length = static_cast<double>(caption.size());
  for (int n = 1; n <= options_.max_n; ++n) {
    auto& slot = v.grams[n - 1];
    for (const auto& [g, tf] : ngram_counts(caption, n)) {
      const double w = tf * stats_->idf(g);
      slot.emplace(g, w);
      v.norms[n - 1] += w * w;
    }
    v.norms[n - 1] = std::sqrt(v.norms[n - 1]);
  }
  return v;
}

double CiderScorer::similarity(const Vec& cand, const Vec& ref, int order) const {
  const double nc = cand.norms[order];
  const double nr = ref.norms[order];
  if (nc == 0.0 || nr == 0.0) return 0.0;
  const bool clip = options_.variant == CiderVariant::kCiderD;
  double dot = 0.0;
  const auto& rg = ref.grams[order];
  for (const auto& [g, wc] : cand.grams[order]) {
    auto it = rg.find(g);
    if (it == rg.end()) continue;
    dot += (clip ? std::min(wc, it->second) : wc) * it->second;
  }
  double val = dot / (nc * nr);
  if (clip) {
    const double delta = cand.length - ref.length;
    val *= std::exp(-(delta * delta) / (2.0 * options_.sigma * options_.sigma));
  }
  return val;
}

double CiderScorer::score(std::span<const Token> candidate) const {
  if (candidate.empty() || refs_.empty()) return 0.0;
  const Vec cand = vectorise(candidate);
  double total = 0.0;
  for (int n = 0; n < options_.max_n; ++n) {
    double per_order = 0.0;
    for (const auto& ref : refs_) per_order += similarity(cand, ref, n);
    total += per_order / static_cast<double>(refs_.size());
  }
  return 10.0 * total / options_.max_n;
}

double cider_d(std::span<const Token> candidate, std::span<const Caption> refs, const DfStats& stats,
               CiderOptions options) {
  return CiderScorer(stats, refs, options).score(candidate);
}

double bleu_n(std::span<const Token> candidate, std::span<const Caption> refs, int n, double epsilon) {
  if (candidate.empty() || refs.empty() || n < 1) return 0.0;
  const auto c = static_cast<double>(candidate.size());

  double log_sum = 0.0;
  int orders = 0;
  for (int m = 1; m <= n; ++m) {
    const auto cand_counts = ngram_counts(candidate, m);
    if (cand_counts.empty()) break;
    NGramCounts max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, cnt] : ngram_counts(r, m)) {
        auto& slot = max_ref[g];
        slot = std::max(slot, cnt);
      }
    }
    int matched = 0;
    int total = 0;
    for (const auto& [g, cnt] : cand_counts) {
      total += cnt;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(cnt, it->second);
    }
    const double p = matched == 0 ? epsilon : static_cast<double>(matched) / total;
    log_sum += std::log(p);
    ++orders;
  }

  double closest = static_cast<double>(refs.front().size());
  for (const auto& r : refs) {
    const auto len = static_cast<double>(r.size());
    const double d = std::abs(len - c);
    const double best = std::abs(closest - c);
    if (d < best || (d == best && len < closest)) closest = len;
  }
  const double bp = c >= closest ? 1.0 : std::exp(1.0 - closest / c);
  return bp * std::exp(log_sum / orders);
}

std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const Token> candidate, std::span<const Caption> refs, double beta_sq) {
  double best = 0.0;
  if (candidate.empty()) return 0.0;
  for (const auto& r : refs) {
    if (r.empty()) continue;
    const auto lcs = static_cast<double>(lcs_length(candidate, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidate.size());
    const double rec = lcs / static_cast<double>(r.size());
    best = std::max(best, (1.0 + beta_sq) * p * rec / (rec + beta_sq * p));
  }
  return best;
}

}  // namespace qcap
