#include "qcap/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "qcap/errors.hpp"

namespace qcap {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

const std::vector<Token> kFunctionWords = {"a", "the", "on", "in", "with", "of", "at", "near"};
constexpr int kContentPerTopic = 6;  // 4 template slots + 2 substitutes
constexpr int kTemplateLen = 8;

std::string padded(const std::string& prefix, int i, int width) {
  std::string digits = std::to_string(i);
  if (static_cast<int>(digits.size()) < width) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

}  // namespace

Eigen::VectorXd hashed_feature(const std::string& key, int dim) {
  Rng rng(fnv1a(key));
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  Eigen::VectorXd f(dim);
  for (int i = 0; i < dim; ++i) f[i] = unif(rng);
  return f;
}

ImageContext Dataset::context(const RefSet& image) const {
  auto it = features.find(image.image_id);
  if (it != features.end()) return {image.image_id, it->second};
  return {image.image_id, hashed_feature("image:" + image.image_id, feature_dim)};
}

const std::vector<RefSet>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "'");
}

Dataset gen_synthetic_corpus(const SynthConfig& cfg) {
  if (cfg.n_images < 3) throw ConfigError("n_images must be at least 3");
  if (cfg.k < 2) throw ConfigError("k must be at least 2");
  if (cfg.n_topics < 1) throw ConfigError("n_topics must be positive");
  if (!(cfg.idiosyncrasy >= 0.0 && cfg.idiosyncrasy <= 1.0)) throw ConfigError("idiosyncrasy must be in [0, 1]");
  const int n_function = static_cast<int>(kFunctionWords.size());
  const int n_long_tail = cfg.vocab_size - n_function - cfg.n_topics * kContentPerTopic;
  if (n_long_tail < 16) {
    throw ConfigError("vocab_size " + std::to_string(cfg.vocab_size) + " too small for " +
                      std::to_string(cfg.n_topics) + " topics");
  }

  Rng rng(cfg.seed);
  std::vector<Token> words = kFunctionWords;
  std::vector<std::vector<Token>> content(cfg.n_topics);
  for (int t = 0; t < cfg.n_topics; ++t) {
    for (int j = 0; j < kContentPerTopic; ++j) {
      content[t].push_back(padded("t", t, 2) + "w" + std::to_string(j));
      words.push_back(content[t].back());
    }
  }
  std::vector<Token> long_tail;
  for (int i = 0; i < n_long_tail; ++i) {
    long_tail.push_back(padded("x", i, 3));
    words.push_back(long_tail.back());
  }

  // f c c f f c f c
  std::vector<Caption> templates(cfg.n_topics);
  std::uniform_int_distribution<int> pick_fn(0, n_function - 1);
  for (int t = 0; t < cfg.n_topics; ++t) {
    const auto& c = content[t];
    templates[t] = {kFunctionWords[pick_fn(rng)], c[0], c[1], kFunctionWords[pick_fn(rng)],
                    kFunctionWords[pick_fn(rng)], c[2], kFunctionWords[pick_fn(rng)], c[3]};
  }

  const int n_idio = static_cast<int>(std::lround(cfg.idiosyncrasy * cfg.k));
  std::uniform_int_distribution<int> pick_topic(0, cfg.n_topics - 1);
  std::uniform_int_distribution<int> pick_tail(0, n_long_tail - 1);
  std::uniform_int_distribution<int> pick_len(9, 12);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  // anchor prefix length of long-tail captions: 0..3 template tokens
  std::discrete_distribution<int> pick_anchor({0.4, 0.1, 0.3, 0.2});

  Dataset all;
  all.feature_dim = cfg.feature_dim;
  all.vocab = Vocab(words);
  for (int i = 0; i < cfg.n_images; ++i) {
    const int topic = pick_topic(rng);
    const auto& tmpl = templates[topic];
    RefSet image{padded("syn", i, 5), {}};
    std::vector<int> order(cfg.k);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> idio(cfg.k, false);
    for (int j = 0; j < n_idio; ++j) idio[order[j]] = true;

    for (int r = 0; r < cfg.k; ++r) {
      Caption cap;
      if (idio[r]) {
        const int anchors = pick_anchor(rng);
        const int len = pick_len(rng);
        cap.assign(tmpl.begin(), tmpl.begin() + anchors);
        while (static_cast<int>(cap.size()) < len) cap.push_back(long_tail[pick_tail(rng)]);
      } else {
        for (int pos = 0; pos < kTemplateLen; ++pos) {
          const bool is_content = pos == 1 || pos == 2 || pos == 5 || pos == 7;
          Token tok = tmpl[pos];
          if (is_content && unif(rng) < 0.15) {
            tok = content[topic][4 + (unif(rng) < 0.5 ? 0 : 1)];
          } else if (!is_content && unif(rng) < 0.1) {
            tok = kFunctionWords[pick_fn(rng)];
          }
          cap.push_back(tok);
        }
        const double u = unif(rng);
        if (u < 0.1) {
          cap.pop_back();
        } else if (u < 0.2) {
          cap.push_back(content[topic][4 + (unif(rng) < 0.5 ? 0 : 1)]);
        }
      }
      image.refs.push_back(std::move(cap));
    }
    all.features[image.image_id] = hashed_feature("topic:" + std::to_string(topic), cfg.feature_dim);
    all.train.push_back(std::move(image));
  }
  return split_dataset(all, cfg.split, cfg.seed);
}

Dataset split_dataset(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be non-negative");
  }
  std::vector<RefSet> pool;
  for (const auto* part : {&ds.train, &ds.val, &ds.test}) pool.insert(pool.end(), part->begin(), part->end());
  std::sort(pool.begin(), pool.end(), [](const RefSet& a, const RefSet& b) { return a.image_id < b.image_id; });
  for (std::size_t i = 1; i < pool.size(); ++i) {
    if (pool[i].image_id == pool[i - 1].image_id) throw ConfigError("duplicate image id '" + pool[i].image_id + "'");
  }
  Rng rng(seed ^ 0x5eed5eed5eedULL);
  std::shuffle(pool.begin(), pool.end(), rng);

  const auto n = pool.size();
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
  const auto n_test = n - n_train - n_val;
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw ConfigError("split leaves an empty partition (" + std::to_string(n_train) + "/" + std::to_string(n_val) +
                      "/" + std::to_string(n_test) + ")");
  }
  Dataset out;
  out.vocab = ds.vocab;
  out.feature_dim = ds.feature_dim;
  out.features = ds.features;
  out.train.assign(pool.begin(), pool.begin() + n_train);
  out.val.assign(pool.begin() + n_train, pool.begin() + n_train + n_val);
  out.test.assign(pool.begin() + n_train + n_val, pool.end());
  out.stats = DfStats::build(out.train);
  return out;
}

namespace {

// Byte offsets of the objects that are elements of the top-level "images"
// array, found with a small string-aware scan of the raw text.
std::vector<std::size_t> image_offsets(const std::string& text) {
  std::vector<std::size_t> offsets;
  std::vector<char> stack;
  std::string last_key;
  std::string current;
  bool in_string = false;
  bool escape = false;
  bool images_open = false;
  std::size_t images_depth = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escape) {
        escape = false;
      } else if (c == '\\') {
        escape = true;
      } else if (c == '"') {
        in_string = false;
        last_key = current;
      } else {
        current.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        in_string = true;
        current.clear();
        break;
      case '[':
        stack.push_back('[');
        if (stack.size() == 2 && last_key == "images") {
          images_open = true;
          images_depth = stack.size();
        }
        break;
      case '{':
        if (images_open && stack.size() == images_depth) offsets.push_back(i);
        stack.push_back('{');
        break;
      case ']':
      case '}':
        if (!stack.empty()) stack.pop_back();
        if (images_open && stack.size() < images_depth) images_open = false;
        break;
      default:
        break;
    }
  }
  return offsets;
}

std::string id_string(const nlohmann::json& id) {
  if (id.is_string()) return id.get<std::string>();
  if (id.is_number_integer()) return std::to_string(id.get<long long>());
  throw nlohmann::json::type_error::create(302, "image id must be a string or integer", &id);
}

}  // namespace

Dataset parse_coco_json(const std::string& text, const std::string& source, LoadOptions options) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source, e.byte > 0 ? e.byte - 1 : 0, e.what());
  }
  const auto offsets = image_offsets(text);
  if (!root.is_object() || !root.contains("images") || !root["images"].is_array()) {
    throw ParseError(source, 0, "missing top-level \"images\" array");
  }

  struct Raw {
    RefSet refs;
    std::string split;
    std::vector<double> feature;
  };
  std::vector<Raw> raw;
  const auto& images = root["images"];
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t at = i < offsets.size() ? offsets[i] : 0;
    try {
      const auto& img = images[i];
      Raw r;
      r.refs.image_id = id_string(img.at("id"));
      r.split = img.at("split").get<std::string>();
      if (r.split == "restval") r.split = "train";
      if (r.split != "train" && r.split != "val" && r.split != "test") {
        throw ParseError(source, at, "unknown split '" + r.split + "'");
      }
      const auto& sentences = img.at("sentences");
      if (!sentences.is_array() || sentences.empty()) throw ParseError(source, at, "image has no sentences");
      for (const auto& s : sentences) {
        auto tokens = s.at("tokens").get<Caption>();
        if (tokens.empty()) throw ParseError(source, at, "empty caption");
        r.refs.refs.push_back(std::move(tokens));
      }
      if (img.contains("feature")) r.feature = img["feature"].get<std::vector<double>>();
      raw.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(source, at, std::string("image ") + std::to_string(i) + ": " + e.what());
    }
  }

  std::map<Token, int> freq;
  for (const auto& r : raw) {
    if (r.split != "train") continue;
    for (const auto& c : r.refs.refs) {
      for (const auto& t : c) ++freq[t];
    }
  }
  std::vector<Token> kept;
  for (const auto& [t, n] : freq) {
    if (n >= options.min_freq) kept.push_back(t);
  }

  Dataset ds;
  ds.vocab = Vocab(kept);
  ds.feature_dim = options.feature_dim;
  std::set<std::string> seen;
  for (auto& r : raw) {
    if (!seen.insert(r.refs.image_id).second) throw ParseError(source, 0, "duplicate image id '" + r.refs.image_id + "'");
    for (auto& c : r.refs.refs) {
      for (auto& t : c) {
        if (!ds.vocab.contains(t)) t = ds.vocab.token(Vocab::kUnk);
      }
    }
    if (!r.feature.empty()) {
      if (static_cast<int>(r.feature.size()) != options.feature_dim) {
        throw ConfigError("feature of image '" + r.refs.image_id + "' has dimension " +
                          std::to_string(r.feature.size()));
      }
      ds.features[r.refs.image_id] = Eigen::Map<const Eigen::VectorXd>(r.feature.data(), r.feature.size());
    }
    auto& dst = r.split == "train" ? ds.train : r.split == "val" ? ds.val : ds.test;
    dst.push_back(std::move(r.refs));
  }
  ds.stats = DfStats::build(ds.train);
  return ds;
}

Dataset load_coco_json(const std::string& path, LoadOptions options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_coco_json(buf.str(), path, options);
}

std::string to_coco_json(const Dataset& ds) {
  nlohmann::ordered_json images = nlohmann::ordered_json::array();
  for (const auto* name : {"train", "val", "test"}) {
    for (const auto& img : ds.split(name)) {
      nlohmann::ordered_json j;
      j["id"] = img.image_id;
      j["split"] = name;
      auto sentences = nlohmann::ordered_json::array();
      for (const auto& c : img.refs) sentences.push_back({{"tokens", c}, {"raw", join_tokens(c)}});
      j["sentences"] = std::move(sentences);
      auto it = ds.features.find(img.image_id);
      if (it != ds.features.end()) j["feature"] = std::vector<double>(it->second.begin(), it->second.end());
      images.push_back(std::move(j));
    }
  }
  nlohmann::ordered_json root;
  root["images"] = std::move(images);
  return root.dump();
}

}  // namespace qcap
