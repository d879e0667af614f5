#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "qcap/data.hpp"
#include "qcap/errors.hpp"
#include "qcap/quality.hpp"

using namespace qcap;

#ifndef QCAP_FIXTURE_DIR
#define QCAP_FIXTURE_DIR "tests/fixtures"
#endif

namespace {

std::set<std::string> ids(const std::vector<RefSet>& images) {
  std::set<std::string> out;
  for (const auto& r : images) out.insert(r.image_id);
  return out;
}

bool is_long_tail(const Caption& c) {
  return std::any_of(c.begin(), c.end(), [](const Token& t) { return t.size() == 4 && t[0] == 'x'; });
}

}  // namespace

TEST_CASE("synthetic corpus shape") {
  const SynthConfig cfg;
  const auto ds = gen_synthetic_corpus(cfg);
  CHECK(ds.train.size() == 400);
  CHECK(ds.val.size() == 50);
  CHECK(ds.test.size() == 50);
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (const auto& img : *split) {
      REQUIRE(img.refs.size() == 5);
      // rate x k = 1 long-tail reference per image
      CHECK(std::count_if(img.refs.begin(), img.refs.end(), is_long_tail) == 1);
      for (const auto& c : img.refs) {
        CHECK(c.size() >= 4);
        CHECK(c.size() <= 12);
      }
      const auto ctx = ds.context(img);
      CHECK(ctx.feature.size() == cfg.feature_dim);
      CHECK(ctx.feature.cwiseAbs().maxCoeff() <= 1.0);
    }
  }
}

TEST_CASE("same seed gives the same corpus") {
  SynthConfig cfg;
  cfg.n_images = 60;
  const auto a = gen_synthetic_corpus(cfg), b = gen_synthetic_corpus(cfg);
  CHECK(to_coco_json(a) == to_coco_json(b));
  cfg.seed = 2;
  CHECK(to_coco_json(gen_synthetic_corpus(cfg)) != to_coco_json(a));
}

TEST_CASE("generator rejects bad configs") {
  SynthConfig cfg;
  cfg.vocab_size = 100;
  CHECK_THROWS_AS(gen_synthetic_corpus(cfg), ConfigError);
  cfg = {};
  cfg.k = 1;
  CHECK_THROWS_AS(gen_synthetic_corpus(cfg), ConfigError);
  cfg = {};
  cfg.idiosyncrasy = 1.5;
  CHECK_THROWS_AS(gen_synthetic_corpus(cfg), ConfigError);
}

TEST_CASE("annotation of generated corpora") {
  SynthConfig cfg;
  cfg.idiosyncrasy = 0.0;
  const auto clean = gen_synthetic_corpus(cfg);
  const auto a0 = annotate_dataset(clean.train, clean.stats, ThresholdTable::xe_default(), true);
  const int total = a0.histogram[0] + a0.histogram[1] + a0.histogram[2];
  CHECK(a0.histogram[2] >= 0.9 * total);

  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    cfg = {};
    cfg.seed = seed;
    const auto ds = gen_synthetic_corpus(cfg);
    const auto ann = annotate_dataset(ds.train, ds.stats, ThresholdTable::xe_default(), true);
    for (int n : ann.histogram) CHECK(n > 0);
  }
}

TEST_CASE("splits") {
  SynthConfig cfg;
  cfg.n_images = 100;
  const auto ds = gen_synthetic_corpus(cfg);
  const auto s = split_dataset(ds, {0.8, 0.1, 0.1}, 9);
  CHECK(s.train.size() == 80);
  CHECK(s.val.size() == 10);
  CHECK(s.test.size() == 10);
  const auto tr = ids(s.train), va = ids(s.val), te = ids(s.test);
  for (const auto& id : va) CHECK_FALSE(tr.contains(id));
  for (const auto& id : te) CHECK_FALSE(tr.contains(id));
  for (const auto& id : te) CHECK_FALSE(va.contains(id));
  CHECK(tr.size() + va.size() + te.size() == 100);

  const auto again = split_dataset(ds, {0.8, 0.1, 0.1}, 9);
  CHECK(ids(again.train) == tr);
  CHECK(ids(again.val) == va);
  CHECK_THROWS_AS(split_dataset(ds, {1.0, 0.0, 0.0}, 9), ConfigError);
  CHECK_THROWS_AS(split_dataset(ds, {0.5, 0.2, 0.2}, 9), ConfigError);
}

TEST_CASE("document frequencies never see val or test") {
  SynthConfig cfg;
  cfg.n_images = 80;
  const auto ds = gen_synthetic_corpus(cfg);
  const auto train_only = DfStats::build(ds.train);
  CHECK(train_only.n_images() == ds.stats.n_images());
  CHECK(train_only.table() == ds.stats.table());
}

TEST_CASE("two-image fixture") {
  const auto ds = load_coco_json(std::string(QCAP_FIXTURE_DIR) + "/coco_two_images.json");
  CHECK(ds.train.size() + ds.val.size() + ds.test.size() == 2);
  REQUIRE(ds.train.size() == 1);
  REQUIRE(ds.val.size() == 1);
  CHECK(ds.train[0].image_id == "391895");
  // min_freq 2 keeps only words seen twice in train
  CHECK(ds.vocab.contains("bike"));
  CHECK_FALSE(ds.vocab.contains("rides"));
  CHECK(ds.train[0].refs[0] == Caption{"a", "man", "<unk>", "a", "bike"});
  CHECK(ds.val[0].refs[0] == Caption{"a", "<unk>", "<unk>", "a", "<unk>"});
  CHECK(ds.stats.n_images() == 1);
}

TEST_CASE("schema errors carry path and offset") {
  const std::string text =
      "{\"images\": [{\"id\": 1, \"split\": \"train\", \"sentences\": [{\"tokens\": [\"a\"]}]},\n"
      "             {\"id\": 2, \"split\": \"val\"}]}";
  try {
    parse_coco_json(text, "bad.json");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.path() == "bad.json");
    CHECK(e.byte_offset() == text.find("{\"id\": 2"));
  }
  CHECK_THROWS_AS(parse_coco_json("{\"images\": [", "x"), ParseError);
  CHECK_THROWS_AS(parse_coco_json("{}", "x"), ParseError);
  CHECK_THROWS_AS(load_coco_json("/nonexistent/file.json"), ParseError);
}

TEST_CASE("synthetic corpus survives export and import") {
  SynthConfig cfg;
  cfg.n_images = 40;
  const auto ds = gen_synthetic_corpus(cfg);
  LoadOptions opts;
  opts.min_freq = 1;
  opts.feature_dim = cfg.feature_dim;
  const auto back = parse_coco_json(to_coco_json(ds), "<export>", opts);
  CHECK(ids(back.train) == ids(ds.train));
  CHECK(ids(back.val) == ids(ds.val));
  CHECK(ids(back.test) == ids(ds.test));
  for (std::size_t i = 0; i < ds.train.size(); ++i) CHECK(back.train[i].refs == ds.train[i].refs);
  for (const auto& img : ds.test) CHECK(back.context(img).feature == ds.context(img).feature);
  // words never seen in train come back as <unk>
  for (std::size_t i = 0; i < ds.val.size(); ++i) {
    for (std::size_t j = 0; j < ds.val[i].refs.size(); ++j) {
      const auto& orig = ds.val[i].refs[j];
      const auto& got = back.val[i].refs[j];
      REQUIRE(got.size() == orig.size());
      for (std::size_t t = 0; t < orig.size(); ++t) {
        CHECK(got[t] == (back.vocab.contains(orig[t]) ? orig[t] : "<unk>"));
      }
    }
  }
}
