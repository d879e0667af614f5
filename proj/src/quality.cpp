#include "qcap/quality.hpp"

#include <algorithm>
#include <future>
#include <sstream>

#include <json.hpp>

#include "qcap/errors.hpp"

namespace qcap {

std::string to_string(TableMode mode) { return mode == TableMode::kXE ? "XE" : "RL"; }

TableMode table_mode_from_string(const std::string& s) {
  if (s == "XE" || s == "xe") return TableMode::kXE;
  if (s == "RL" || s == "rl") return TableMode::kRL;
  throw ConfigError("unknown table mode '" + s + "'");
}

ThresholdTable::ThresholdTable(TableMode mode, std::vector<double> cuts) : mode_(mode), cuts_(std::move(cuts)) {
  for (std::size_t i = 1; i < cuts_.size(); ++i) {
    if (!(cuts_[i - 1] < cuts_[i])) throw ConfigError("threshold cuts must be strictly increasing");
  }
}

ThresholdTable ThresholdTable::xe_default() { return {TableMode::kXE, {2.3, 2.5}}; }
ThresholdTable ThresholdTable::rl_default() { return {TableMode::kRL, {0.7, 1.3}}; }

QualityLevel assign_level(double score, const ThresholdTable& table) {
  const auto& cuts = table.cuts();
  // number of cuts strictly below the score
  return static_cast<QualityLevel>(std::lower_bound(cuts.begin(), cuts.end(), score) - cuts.begin());
}

std::vector<double> quantile_cuts(std::vector<double> scores, int num_levels) {
  if (num_levels < 1) throw ConfigError("num_levels must be positive");
  if (scores.empty()) throw ConfigError("quantile_cuts needs at least one score");
  std::sort(scores.begin(), scores.end());
  std::vector<double> cuts;
  for (int i = 1; i < num_levels; ++i) {
    const auto idx = std::min(scores.size() - 1, scores.size() * i / num_levels);
    // boundary value belongs to the lower bin, so cut at the last value of bin i-1
    const double cut = scores[idx == 0 ? 0 : idx - 1];
    if (!cuts.empty() && cut <= cuts.back()) continue;
    cuts.push_back(cut);
  }
  return cuts;
}

double score_caption_quality(std::span<const Token> candidate, const RefSet& refs, const DfStats& stats,
                             bool self_inclusion, CiderOptions options) {
  if (self_inclusion) return cider_d(candidate, refs.refs, stats, options);
  std::vector<Caption> kept;
  bool removed = false;
  for (const auto& r : refs.refs) {
    if (!removed && std::equal(r.begin(), r.end(), candidate.begin(), candidate.end())) {
      removed = true;
      continue;
    }
    kept.push_back(r);
  }
  if (kept.empty()) throw DegenerateRefSet("leave-one-out left no references for image '" + refs.image_id + "'");
  return cider_d(candidate, kept, stats, options);
}

namespace {

AnnotatedImage annotate_image(const RefSet& image, const DfStats& stats, const ThresholdTable& table,
                              bool self_inclusion, const CiderOptions& options) {
  AnnotatedImage out;
  out.image_id = image.image_id;
  if (self_inclusion) {
    const CiderScorer scorer(stats, image.refs, options);
    for (const auto& cap : image.refs) {
      const double s = scorer.score(cap);
      out.captions.push_back({cap, s, assign_level(s, table)});
    }
    return out;
  }
  if (image.refs.size() < 2) {
    throw DegenerateRefSet("leave-one-out left no references for image '" + image.image_id + "'");
  }
  for (std::size_t i = 0; i < image.refs.size(); ++i) {
    std::vector<Caption> others;
    for (std::size_t j = 0; j < image.refs.size(); ++j) {
      if (j != i) others.push_back(image.refs[j]);
    }
    const double s = cider_d(image.refs[i], others, stats, options);
    out.captions.push_back({image.refs[i], s, assign_level(s, table)});
  }
  return out;
}

}  // namespace

Annotation annotate_dataset(std::span<const RefSet> corpus, const DfStats& stats, const ThresholdTable& table,
                            bool self_inclusion, CiderOptions options, int workers) {
  if (corpus.empty()) throw ConfigError("annotate_dataset: empty corpus");
  Annotation result;
  result.mode = table.mode();
  result.images.resize(corpus.size());
  const std::size_t n_workers = std::clamp<std::size_t>(workers, 1, corpus.size());
  if (n_workers == 1) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      result.images[i] = annotate_image(corpus[i], stats, table, self_inclusion, options);
    }
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < n_workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t i = w; i < corpus.size(); i += n_workers) {
          result.images[i] = annotate_image(corpus[i], stats, table, self_inclusion, options);
        }
      }));
    }
    for (auto& j : jobs) j.get();
  }
  result.histogram.assign(table.num_levels(), 0);
  for (const auto& img : result.images) {
    for (const auto& c : img.captions) ++result.histogram[c.level];
  }
  return result;
}

std::string write_annotations(const Annotation& annotation) {
  std::ostringstream os;
  for (const auto& img : annotation.images) {
    for (const auto& c : img.captions) {
      nlohmann::ordered_json rec;
      rec["image_id"] = img.image_id;
      rec["tokens"] = c.caption;
      rec["quality_score"] = c.quality_score;
      rec["level"] = c.level;
      rec["table_mode"] = to_string(annotation.mode);
      os << rec.dump() << '\n';
    }
  }
  return os.str();
}

Annotation read_annotations(const std::string& text, const std::string& source) {
  Annotation out;
  std::istringstream is(text);
  std::string line;
  std::size_t offset = 0;
  bool first = true;
  int max_level = -1;
  while (std::getline(is, line)) {
    const std::size_t line_offset = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(source, line_offset + (e.byte > 0 ? e.byte - 1 : 0), e.what());
    }
    try {
      const auto mode = table_mode_from_string(rec.at("table_mode").get<std::string>());
      if (first) out.mode = mode;
      first = false;
      const auto image_id = rec.at("image_id").get<std::string>();
      if (out.images.empty() || out.images.back().image_id != image_id) out.images.push_back({image_id, {}});
      AnnotatedCaption c;
      c.caption = rec.at("tokens").get<Caption>();
      c.quality_score = rec.at("quality_score").get<double>();
      c.level = rec.at("level").get<int>();
      max_level = std::max(max_level, c.level);
      out.images.back().captions.push_back(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(source, line_offset, e.what());
    } catch (const ConfigError& e) {
      throw ParseError(source, line_offset, e.what());
    }
  }
  out.histogram.assign(std::max(max_level + 1, 0), 0);
  for (const auto& img : out.images) {
    for (const auto& c : img.captions) ++out.histogram[c.level];
  }
  return out;
}

}  // namespace qcap
