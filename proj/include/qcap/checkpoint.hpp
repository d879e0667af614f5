#pragma once

// Checkpoint files: one JSON header line (format version, model config,
// shapes, vocabulary, rng state, free-form metadata) followed by one line per
// parameter tensor, "<name> <count> <hexfloat>...". Hex floats make the
// round trip exact.

#include <string>

#include <json.hpp>

#include "qcap/model.hpp"

namespace qcap {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  PolicyParams<double> params;
  Vocab vocab;
  std::string rng_state;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& text, const std::string& source = "<memory>");

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

nlohmann::ordered_json model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace qcap
