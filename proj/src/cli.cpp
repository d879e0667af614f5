#include "qcap/cli.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "qcap/checkpoint.hpp"
#include "qcap/data.hpp"
#include "qcap/errors.hpp"
#include "qcap/quality.hpp"
#include "qcap/training.hpp"

namespace qcap {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct Common {
  std::string config;
  std::string out = "out";
  std::uint64_t seed = 1;
  int workers = 1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "flat key=value file; command-line flags take precedence");
  sub->add_option("--seed", c.seed, "root seed for every random stream");
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("--workers", c.workers, "threads for annotation and evaluation")->check(CLI::PositiveNumber);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Fills options that were not given on the command line from a flat
// "key = value" file. Keys are long option names without dashes; '_' and '-'
// are interchangeable; '#' starts a comment.
void apply_config_file(CLI::App* sub, const std::string& path) {
  const std::string text = read_file(path);
  std::istringstream lines(text);
  std::string line;
  std::size_t offset = 0;
  while (std::getline(lines, line)) {
    const std::size_t at = offset;
    offset += line.size() + 1;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError(path, "expected key = value at byte " + std::to_string(at));
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (key == "config") throw CLI::ValidationError(path, "config files cannot include other config files");
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (!opt) throw CLI::ValidationError(path, "unknown key '" + key + "' for command " + sub->get_name());
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

// Effective value of every option of a command, for the manifest.
ojson effective_config(const CLI::App* sub) {
  ojson cfg = ojson::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_name(false, true);
    if (name.empty() || name == "--help" || name == "--config" || name == "--out") continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    cfg[name.substr(2)] = value;
  }
  return cfg;
}

/// Records inputs and written artifacts; `finish` writes manifest.json next
/// to them. Paths of artifacts are relative to the output directory so two
/// runs that differ only in where they write have identical manifests.
class Manifest {
 public:
  Manifest(const std::string& command, const CLI::App* sub, const Common& common) : dir_(common.out) {
    doc_["command"] = command;
    doc_["seed"] = common.seed;
    doc_["workers"] = common.workers;
    doc_["config"] = effective_config(sub);
    doc_["versions"] = {{"qcap", kVersion},
                        {"checkpoint_format", kCheckpointVersion},
                        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                      "." + std::to_string(EIGEN_MINOR_VERSION)},
                        {"compiler", __VERSION__}};
    doc_["inputs"] = ojson::array();
    doc_["artifacts"] = ojson::array();
    fs::create_directories(dir_);
  }

  void input(const std::string& path, const std::string& bytes) {
    doc_["inputs"].push_back({{"path", path}, {"bytes", bytes.size()}, {"fnv1a64", fnv1a64(bytes)}});
  }

  void artifact(const std::string& name, const std::string& bytes) {
    const fs::path p = dir_ / name;
    std::ofstream f(p, std::ios::binary);
    if (!f) throw ParseError(p.string(), 0, "cannot write file");
    f << bytes;
    doc_["artifacts"].push_back({{"path", name}, {"bytes", bytes.size()}, {"fnv1a64", fnv1a64(bytes)}});
  }

  void finish() {
    std::ofstream f(dir_ / "manifest.json", std::ios::binary);
    f << doc_.dump(2) << "\n";
  }

 private:
  fs::path dir_;
  ojson doc_;
};

struct DataArgs {
  std::string path;
  int min_freq = 2;
  int feature_dim = 64;
};

void add_data(CLI::App* sub, DataArgs& d) {
  sub->add_option("--data", d.path, "COCO-style corpus file")->required();
  sub->add_option("--min-freq", d.min_freq, "vocabulary frequency cutoff over train");
  sub->add_option("--feature-dim", d.feature_dim, "image feature dimension");
}

Dataset load_data(const DataArgs& d, Manifest& m) {
  const std::string text = read_file(d.path);
  m.input(d.path, text);
  LoadOptions opts;
  opts.min_freq = d.min_freq;
  opts.feature_dim = d.feature_dim;
  return parse_coco_json(text, d.path, opts);
}

ThresholdTable make_table(TableMode mode, const std::vector<double>& cuts) {
  if (cuts.empty()) return mode == TableMode::kXE ? ThresholdTable::xe_default() : ThresholdTable::rl_default();
  return ThresholdTable(mode, cuts);
}

CiderOptions cider_options(const std::string& variant) {
  CiderOptions o;
  if (variant == "cider") o.variant = CiderVariant::kCider;
  return o;
}

void print_rows(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << std::left << std::setw(7) << "level" << std::right << std::setw(9) << "BLEU-1" << std::setw(9) << "BLEU-4"
      << std::setw(9) << "ROUGE-L" << std::setw(9) << "CIDEr-D" << std::setw(8) << "images" << "\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    out << std::left << std::setw(7) << r.level << std::right << std::setw(9) << r.bleu1 << std::setw(9) << r.bleu4
        << std::setw(9) << r.rouge_l << std::setw(9) << r.cider << std::setw(8) << r.n_images << "\n";
  }
  out << std::defaultfloat;
}

std::string rows_jsonl(const std::vector<MetricRow>& rows, const std::string& split) {
  std::string s;
  for (const auto& r : rows) {
    ojson j{{"split", split}, {"level", r.level},     {"bleu1", r.bleu1},       {"bleu4", r.bleu4},
            {"rouge_l", r.rouge_l}, {"cider", r.cider}, {"n_images", r.n_images}};
    s += j.dump() + "\n";
  }
  return s;
}

void check_vocab(const Checkpoint& ckpt, const Dataset& ds) {
  if (!(ckpt.vocab == ds.vocab)) throw ContractViolation("checkpoint vocabulary does not match the corpus vocabulary");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quality-controllable captioning toolkit: corpora, annotation, training and evaluation."};
  app.name("qcap");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", kVersion);

  Common common;
  DataArgs data;

  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic corpus");
  SynthConfig synth;
  std::vector<double> fractions{0.8, 0.1, 0.1};
  add_common(gen, common);
  gen->add_option("--n-images", synth.n_images);
  gen->add_option("--k", synth.k, "references per image");
  gen->add_option("--vocab-size", synth.vocab_size);
  gen->add_option("--topics", synth.n_topics);
  gen->add_option("--idiosyncrasy", synth.idiosyncrasy, "fraction of long-tail references per image");
  gen->add_option("--feature-dim", synth.feature_dim);
  gen->add_option("--split-fractions", fractions, "train,val,test")->delimiter(',')->expected(3);

  auto* ann = app.add_subcommand("annotate", "score reference captions and bin them into quality levels");
  std::string table_mode = "xe", split_name = "train", variant = "cider-d";
  std::vector<double> cuts;
  bool leave_one_out = false;
  add_common(ann, common);
  add_data(ann, data);
  ann->add_option("--table", table_mode)->check(CLI::IsMember({"xe", "rl"}));
  ann->add_option("--cuts", cuts, "override the table's cut points")->delimiter(',');
  ann->add_option("--split", split_name)->check(CLI::IsMember({"train", "val", "test"}));
  ann->add_flag("--leave-one-out", leave_one_out, "score each reference against the others only");
  ann->add_option("--variant", variant)->check(CLI::IsMember({"cider-d", "cider"}));

  auto* tr = app.add_subcommand("train", "train a captioner");
  TrainConfig tc;
  ModelConfig mc;
  std::string method = "qsat", optimizer = "adam", substitution = "cache", init;
  std::vector<double> xe_cuts, rl_cuts;
  bool center = false, retain = false, tr_loo = false;
  add_common(tr, common);
  add_data(tr, data);
  tr->add_option("--method", method)->check(CLI::IsMember({"xe", "scst", "sat", "qsat"}));
  tr->add_flag("--center-level", center, "sat: estimate a center level from a first round of samples");
  tr->add_flag("--retain-low-reward", retain, "sat: train below-baseline samples at the center level instead of dropping them");
  tr->add_option("--init", init, "warm-start checkpoint; skips the cross-entropy epochs");
  tr->add_option("--epochs", tc.epochs, "N: total epochs");
  tr->add_option("--xe-epochs", tc.xe_epochs, "M: cross-entropy epochs before RL");
  tr->add_option("--k", tc.k, "samples per image");
  tr->add_option("--xe-lr", tc.xe_lr);
  tr->add_option("--rl-lr", tc.rl_lr);
  tr->add_option("--optimizer", optimizer)->check(CLI::IsMember({"sgd", "adam"}));
  tr->add_option("--grad-clip", tc.grad_clip, "global norm clip, 0 = off");
  tr->add_option("--dropout", tc.dropout);
  tr->add_option("--batch-size", tc.batch_size, "images per RL step");
  tr->add_option("--xe-batch-size", tc.xe_batch_size, "captions per cross-entropy step");
  tr->add_option("--substitution", substitution, "distributions reused when levels agree")
      ->check(CLI::IsMember({"cache", "recompute"}));
  tr->add_option("--xe-cuts", xe_cuts)->delimiter(',');
  tr->add_option("--rl-cuts", rl_cuts)->delimiter(',');
  tr->add_flag("--leave-one-out", tr_loo, "annotate references against the others only");
  tr->add_option("--d-model", mc.d_model);
  tr->add_option("--max-len", mc.max_len);
  tr->add_flag("--positional", mc.positional, "add a positional embedding to the input sum");

  auto* ev = app.add_subcommand("eval", "greedy-decode a split at fixed levels and score it");
  std::string ckpt_path, eval_split = "test";
  int level = -1;
  bool sweep = false;
  add_common(ev, common);
  add_data(ev, data);
  ev->add_option("--checkpoint", ckpt_path)->required();
  ev->add_option("--split", eval_split)->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--level", level, "quality level to decode at (default: highest)");
  ev->add_flag("--sweep", sweep, "one row per level");

  auto* sc = app.add_subcommand("score", "score one caption against references");
  std::string cand;
  std::vector<std::string> refs;
  std::string score_data;
  add_common(sc, common);
  sc->add_option("--cand", cand)->required();
  sc->add_option("--ref", refs, "reference caption (repeat)")->required();
  int score_dim = 64;
  sc->add_option("--data", score_data, "corpus whose train split supplies document frequencies");
  sc->add_option("--feature-dim", score_dim, "image feature dimension of --data");
  sc->add_option("--variant", variant)->check(CLI::IsMember({"cider-d", "cider"}));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    for (auto* sub : app.get_subcommands()) {
      if (!common.config.empty()) apply_config_file(sub, common.config);
    }
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }

  if (common.workers > 1) {
    err << "note: --workers > 1 parallelises scoring; results are deterministic only with --workers 1\n";
  }

  try {
    if (gen->parsed()) {
      synth.seed = common.seed;
      const auto split = fractions.size() == 3 ? std::array<double, 3>{fractions[0], fractions[1], fractions[2]}
                                               : std::array<double, 3>{0.8, 0.1, 0.1};
      synth.split = split;
      Manifest m("gen-corpus", gen, common);
      const auto ds = gen_synthetic_corpus(synth);
      m.artifact("corpus.json", to_coco_json(ds));
      m.finish();
      out << "images: " << ds.train.size() << " train, " << ds.val.size() << " val, " << ds.test.size()
          << " test; vocabulary " << ds.vocab.size() << "\n";
    } else if (ann->parsed()) {
      Manifest m("annotate", ann, common);
      const auto ds = load_data(data, m);
      const auto mode = table_mode_from_string(table_mode == "xe" ? "XE" : "RL");
      const auto table = make_table(mode, cuts);
      const auto annotation =
          annotate_dataset(ds.split(split_name), ds.stats, table, !leave_one_out, cider_options(variant), common.workers);
      m.artifact("annotations.jsonl", write_annotations(annotation));
      m.finish();
      for (std::size_t i = 0; i < annotation.histogram.size(); ++i) {
        out << "level " << i << ": " << annotation.histogram[i] << "\n";
      }
    } else if (tr->parsed()) {
      Manifest m("train", tr, common);
      const auto ds = load_data(data, m);
      TrainConfig base = tc;
      base.seed = common.seed;
      base.workers = common.workers;
      base.optimizer = optimizer == "sgd" ? OptimizerKind::kSGD : OptimizerKind::kAdam;
      base.substitution = substitution == "cache" ? SubstitutionMode::kCacheReuse : SubstitutionMode::kRecomputeSharedMask;
      base.self_inclusion = !tr_loo;
      base.xe_table = make_table(TableMode::kXE, xe_cuts);
      base.rl_table = make_table(TableMode::kRL, rl_cuts);
      const Method meth = method_from_string(method);
      const TrainConfig cfg = method_config(meth, center, retain, base);

      mc.vocab_size = ds.vocab.size();
      mc.num_levels = cfg.xe_table.num_levels();
      mc.feature_dim = ds.feature_dim;
      std::optional<Params> warm;
      if (!init.empty()) {
        m.input(init, read_file(init));
        auto ck = load_checkpoint(init);
        check_vocab(ck, ds);
        mc = ck.params.config;
        warm = std::move(ck.params);
      }
      std::string log;
      const auto result = train(ds, cfg, mc, std::move(warm), [&](const EpochLog& e) {
        log += epoch_log_json(e) + "\n";
        err << "epoch " << e.epoch << " " << e.phase << " loss " << e.loss;
        if (e.phase != "xe") err << " reward " << e.mean_reward;
        if (!e.val.empty()) err << " val CIDEr@" << e.val.back().level << " " << e.val.back().cider;
        err << "\n";
      });
      Checkpoint ck{result.params, ds.vocab, result.rng_state, {}};
      ck.meta["method"] = method;
      ck.meta["seed"] = common.seed;
      ck.meta["xe_epochs"] = cfg.xe_epochs;
      ck.meta["epochs"] = cfg.epochs;
      m.artifact("checkpoint.qcap", serialize_checkpoint(ck));
      m.artifact("log.jsonl", log);
      m.finish();
      if (!result.log.empty()) print_rows(out, result.log.back().val);
    } else if (ev->parsed()) {
      Manifest m("eval", ev, common);
      const auto ds = load_data(data, m);
      m.input(ckpt_path, read_file(ckpt_path));
      const auto ck = load_checkpoint(ckpt_path);
      check_vocab(ck, ds);
      const int levels = ck.params.config.num_levels;
      const auto& images = ds.split(eval_split);
      std::vector<MetricRow> rows;
      if (sweep) {
        rows = evaluate_sweep(ck.params, ds, images, ds.stats, common.workers);
      } else {
        const int l = level < 0 ? levels - 1 : level;
        if (l >= levels) throw CLI::ValidationError("--level", "must be below " + std::to_string(levels));
        rows.push_back(evaluate_model(ck.params, ds, images, l, ds.stats, common.workers));
      }
      print_rows(out, rows);
      m.artifact("metrics.jsonl", rows_jsonl(rows, eval_split));
      m.finish();
    } else if (sc->parsed()) {
      Manifest m("score", sc, common);
      const Caption c = tokenize(cand);
      RefSet rs{"refs", {}};
      for (const auto& r : refs) rs.refs.push_back(tokenize(r));
      DfStats stats;
      if (!score_data.empty()) {
        DataArgs d;
        d.path = score_data;
        d.feature_dim = score_dim;
        stats = load_data(d, m).stats;
      } else {
        err << "note: no --data given; document frequencies come from the references alone, so CIDEr-D is 0\n";
        stats = DfStats::build(std::vector<RefSet>{rs});
      }
      const double cider = cider_d(c, rs, stats, cider_options(variant));
      ojson j{{"cider", cider}};
      for (int n = 1; n <= 4; ++n) j["bleu" + std::to_string(n)] = bleu_n(c, rs, n);
      j["rouge_l"] = rouge_l(c, rs);
      j["level_xe"] = assign_level(cider, ThresholdTable::xe_default());
      j["level_rl"] = assign_level(cider, ThresholdTable::rl_default());
      for (const auto& [k, v] : j.items()) out << std::left << std::setw(9) << k << " " << v.dump() << "\n";
      m.artifact("score.json", j.dump() + "\n");
      m.finish();
    }
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace qcap
