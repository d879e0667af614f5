#include "qcap/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "qcap/errors.hpp"

namespace qcap {

nlohmann::ordered_json model_config_json(const ModelConfig& cfg) {
  return {{"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},         {"num_levels", cfg.num_levels},
          {"max_len", cfg.max_len},       {"feature_dim", cfg.feature_dim}, {"positional", cfg.positional}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.num_levels = j.at("num_levels").get<int>();
  cfg.max_len = j.at("max_len").get<int>();
  cfg.feature_dim = j.at("feature_dim").get<int>();
  cfg.positional = j.at("positional").get<bool>();
  return cfg;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["format"] = "qcap-checkpoint";
  header["version"] = kCheckpointVersion;
  header["config"] = model_config_json(ckpt.params.config);
  auto shapes = nlohmann::ordered_json::object();
  ckpt.params.for_each([&](const char* name, std::span<const double> s) { shapes[name] = s.size(); });
  header["shapes"] = std::move(shapes);
  header["vocab"] = ckpt.vocab.tokens();
  header["rng_state"] = ckpt.rng_state;
  header["meta"] = ckpt.meta;

  std::string out = header.dump();
  out.push_back('\n');
  char buf[64];
  ckpt.params.for_each([&](const char* name, std::span<const double> s) {
    out += name;
    out += ' ';
    out += std::to_string(s.size());
    for (double v : s) {
      std::snprintf(buf, sizeof buf, " %a", v);
      out += buf;
    }
    out.push_back('\n');
  });
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& text, const std::string& source) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ParseError(source, 0, "empty checkpoint");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source, e.byte > 0 ? e.byte - 1 : 0, e.what());
  }
  Checkpoint ckpt;
  std::size_t offset = line.size() + 1;
  try {
    if (header.at("format").get<std::string>() != "qcap-checkpoint") throw ParseError(source, 0, "not a checkpoint");
    const int version = header.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw ParseError(source, 0, "unsupported checkpoint version " + std::to_string(version));
    }
    const ModelConfig cfg = model_config_from_json(header.at("config"));
    ckpt.params = PolicyParams<double>::zeros(cfg);
    auto tokens = header.at("vocab").get<std::vector<Token>>();
    tokens.erase(tokens.begin(), tokens.begin() + std::min<std::size_t>(Vocab::kNumSentinels, tokens.size()));
    ckpt.vocab = Vocab(tokens);
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    ckpt.meta = header.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source, 0, e.what());
  }
  if (ckpt.vocab.size() != ckpt.params.config.vocab_size) {
    throw ParseError(source, 0, "vocabulary size does not match the model config");
  }

  ckpt.params.for_each([&](const char* name, std::span<double> s) {
    const std::size_t at = offset;
    if (!std::getline(is, line)) throw ParseError(source, at, std::string("missing tensor ") + name);
    offset += line.size() + 1;
    const char* p = line.c_str();
    const std::string expected = std::string(name) + " ";
    if (line.compare(0, expected.size(), expected) != 0) {
      throw ParseError(source, at, std::string("expected tensor ") + name);
    }
    p += expected.size();
    char* end = nullptr;
    const unsigned long long count = std::strtoull(p, &end, 10);
    if (end == p || count != s.size()) throw ParseError(source, at, std::string("bad element count for ") + name);
    p = end;
    for (auto& v : s) {
      v = std::strtod(p, &end);
      if (end == p) throw ParseError(source, at + static_cast<std::size_t>(p - line.c_str()), "bad number");
      p = end;
    }
  });
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << serialize_checkpoint(ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, 0, "cannot open checkpoint");
  std::stringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str(), path);
}

}  // namespace qcap
