#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qcap/metrics.hpp"
#include "qcap/model.hpp"

namespace qcap {

struct SynthConfig {
  int n_images = 500;
  int k = 5;                   // references per image
  int vocab_size = 240;        // distinct corpus words
  int n_topics = 20;
  double idiosyncrasy = 0.2;   // fraction of long-tail references per image
  std::uint64_t seed = 1;
  int feature_dim = 64;
  std::array<double, 3> split = {0.8, 0.1, 0.1};
};

struct Dataset {
  std::vector<RefSet> train, val, test;
  Vocab vocab;
  DfStats stats;  // train references only
  int feature_dim = 0;
  std::map<std::string, Eigen::VectorXd> features;

  ImageContext context(const RefSet& image) const;
  const std::vector<RefSet>& split(const std::string& name) const;
};

// Deterministic feature in [-1, 1]^dim from an arbitrary key.
Eigen::VectorXd hashed_feature(const std::string& key, int dim);

Dataset gen_synthetic_corpus(const SynthConfig& cfg);

struct LoadOptions {
  int min_freq = 2;
  int feature_dim = 64;
};

// COCO/Karpathy-style file:
//   {"images": [{"id": .., "split": "train|val|test|restval",
//                "sentences": [{"tokens": [..]}, ..], "feature": [..]?}, ..]}
Dataset load_coco_json(const std::string& path, LoadOptions options = {});
Dataset parse_coco_json(const std::string& text, const std::string& source, LoadOptions options = {});

// Writes a dataset in the schema above (features included).
std::string to_coco_json(const Dataset& ds);

// Re-partitions all images of `ds` by image id. Vocabulary is kept; the
// document frequencies are rebuilt from the new train split.
Dataset split_dataset(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed);

}  // namespace qcap
