#pragma once

// Sentence quality: a caption's CIDEr-D against the references of its image,
// binned into discrete control levels.

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qcap/metrics.hpp"

namespace qcap {

using QualityLevel = int;

enum class TableMode { kXE, kRL };

std::string to_string(TableMode mode);
TableMode table_mode_from_string(const std::string& s);

/// Ordered cut points. A score x falls in level i iff cuts[i-1] < x <= cuts[i];
/// the top level is open. Ties go to the lower level.
class ThresholdTable {
 public:
  ThresholdTable(TableMode mode, std::vector<double> cuts);

  static ThresholdTable xe_default();  // 2.3 / 2.5
  static ThresholdTable rl_default();  // 0.7 / 1.3

  TableMode mode() const { return mode_; }
  const std::vector<double>& cuts() const { return cuts_; }
  int num_levels() const { return static_cast<int>(cuts_.size()) + 1; }

 private:
  TableMode mode_;
  std::vector<double> cuts_;
};

QualityLevel assign_level(double score, const ThresholdTable& table);

// Cuts that split `scores` into `num_levels` bins of (as near as possible)
// equal mass. Ties in the data may make bins uneven.
std::vector<double> quantile_cuts(std::vector<double> scores, int num_levels);

/// CIDEr-D of `candidate` against `refs`. With self_inclusion=false one copy
/// of the candidate is removed from the references first; DegenerateRefSet
/// if that leaves none.
double score_caption_quality(std::span<const Token> candidate, const RefSet& refs, const DfStats& stats,
                             bool self_inclusion, CiderOptions options = {});

struct AnnotatedCaption {
  Caption caption;
  double quality_score = 0.0;
  QualityLevel level = 0;
};

struct AnnotatedImage {
  std::string image_id;
  std::vector<AnnotatedCaption> captions;
};

struct Annotation {
  TableMode mode = TableMode::kXE;
  std::vector<AnnotatedImage> images;
  std::vector<int> histogram;  // captions per level
};

Annotation annotate_dataset(std::span<const RefSet> corpus, const DfStats& stats, const ThresholdTable& table,
                            bool self_inclusion, CiderOptions options = {}, int workers = 1);

// Line-delimited JSON, one caption per line:
//   {"image_id":..,"tokens":[..],"quality_score":..,"level":..,"table_mode":"XE"}
std::string write_annotations(const Annotation& annotation);
Annotation read_annotations(const std::string& text, const std::string& source = "<memory>");

}  // namespace qcap
