#include <set>

#include "doctest.h"
#include "oeseg/dataset.hpp"
#include "oeseg/error.hpp"
#include "oeseg/features.hpp"
#include "oracles.hpp"

using namespace oeseg;

TEST_CASE("generate is deterministic per seed") {
  SynthSpec spec;
  spec.cases = 2;
  spec.scans_per_case = 3;
  spec.image_side = 32;
  spec.lesion_radius_min = 4;
  spec.lesion_radius_max = 8;
  spec.seed = 5;
  Dataset a = generate(spec);
  Dataset b = generate(spec);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.bit_equal(b[i].image));
    CHECK(a[i].mask.bit_equal(b[i].mask));
  }
  spec.seed = 6;
  Dataset c = generate(spec);
  CHECK_FALSE(a[0].image.bit_equal(c[0].image));
}

TEST_CASE("zero drift and noise give identical scans within a case") {
  SynthSpec spec;
  spec.cases = 2;
  spec.scans_per_case = 4;
  spec.image_side = 32;
  spec.lesion_radius_min = 4;
  spec.lesion_radius_max = 8;
  spec.drift = 0.0;
  spec.noise = 0.0;
  spec.seed = 9;
  Dataset d = generate(spec);
  for (std::size_t i = 1; i < 4; ++i) {
    CHECK(d[i].image.bit_equal(d[0].image));
    CHECK(d[i].mask.bit_equal(d[0].mask));
  }
  // Different cases still differ.
  CHECK_FALSE(d[4].image.bit_equal(d[0].image));
}

TEST_CASE("masks are binary and nonempty when lesions are requested") {
  SynthSpec spec;
  spec.cases = 3;
  spec.scans_per_case = 2;
  spec.image_side = 48;
  spec.lesion_count_min = 1;
  spec.seed = 11;
  for (const BScanRecord& r : generate(spec)) {
    REQUIRE(r.has_mask());
    double total = 0.0;
    for (double v : r.mask.data()) {
      CHECK((v == 0.0 || v == 1.0));
      total += v;
    }
    CHECK(total > 0.0);
    for (double v : r.image.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("case split is whole-case, sized, and seeded") {
  SynthSpec spec;
  spec.cases = 10;
  spec.scans_per_case = 2;
  spec.image_side = 32;
  spec.lesion_radius_min = 4;
  spec.lesion_radius_max = 8;
  Dataset d = generate(spec);
  DatasetIndex index = index_dataset(d);

  CaseSplit s = split_cases(index, 0.5, 3);
  CHECK(s.train_cases.size() == 5);
  CHECK(s.test_cases.size() == 5);
  std::set<std::string> train(s.train_cases.begin(), s.train_cases.end());
  for (const std::string& id : s.test_cases) CHECK(train.count(id) == 0);

  CaseSplit again = split_cases(index, 0.5, 3);
  CHECK(again.train_cases == s.train_cases);

  Dataset small = generate([] {
    SynthSpec sp;
    sp.cases = 1;
    sp.scans_per_case = 2;
    sp.image_side = 32;
    sp.lesion_radius_min = 4;
    sp.lesion_radius_max = 8;
    return sp;
  }());
  DatasetIndex small_index = index_dataset(small);
  CHECK_THROWS_AS(split_cases(small_index, 0.5, 1), ConfigError);
}

TEST_CASE("dataset index canonical order and duplicate rejection") {
  Dataset d;
  for (auto [c, s] : {std::pair{"case_b", 2}, {"case_a", 1}, {"case_b", 0}, {"case_a", 0}}) {
    BScanRecord r;
    r.case_id = c;
    r.scan_index = s;
    r.image = Tensor::zeros({8, 8, 1});
    d.push_back(std::move(r));
  }
  DatasetIndex index = index_dataset(d);
  CHECK(index.size() == 4);
  CHECK(index.case_count() == 2);
  CHECK(index.flat[0] == std::pair<std::string, int>{"case_a", 0});
  CHECK(index.flat[3] == std::pair<std::string, int>{"case_b", 2});
  CHECK(d[0].case_id == "case_a");

  BScanRecord dup;
  dup.case_id = "case_a";
  dup.scan_index = 0;
  dup.image = Tensor::zeros({8, 8, 1});
  d.push_back(std::move(dup));
  CHECK_THROWS_AS(index_dataset(d), DataError);
}

TEST_CASE("extract_feature pooling dimensions and determinism") {
  EncoderConfig cfg = EncoderConfig::desk();
  EncoderWeights w = EncoderWeights::random_init(cfg, 3);
  SynthSpec spec;
  spec.cases = 1;
  spec.scans_per_case = 2;
  spec.seed = 21;
  Dataset d = generate(spec);

  FeatureVector mean = extract_feature(d[0], w, cfg, Pooling::kMeanPool);
  CHECK(mean.values.size() == 64);  // K = D for the desk preset
  FeatureVector flat = extract_feature(d[0], w, cfg, Pooling::kFlatten);
  CHECK(flat.values.size() == cfg.tokens() * 64);

  // The full-scale preset's flattened dimension, by config arithmetic.
  EncoderConfig big = EncoderConfig::vit_large();
  CHECK(big.tokens() * static_cast<std::size_t>(big.width) == 200704);

  // Identical images give identical vectors.
  BScanRecord copy = d[0];
  copy.scan_index = 99;
  FeatureVector again = extract_feature(copy, w, cfg, Pooling::kMeanPool);
  CHECK(again.values.bit_equal(mean.values));

  // Incompatible image size.
  BScanRecord bad;
  bad.case_id = "x";
  bad.scan_index = 0;
  bad.image = Tensor::zeros({48, 48, 1});
  CHECK_THROWS_AS(extract_feature(bad, w, cfg, Pooling::kMeanPool), DimensionError);
}

TEST_CASE("within-case feature distances stay below across-case distances") {
  // The redundancy structure that justifies medoid seeding.
  EncoderConfig cfg = EncoderConfig::desk();
  int successes = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SynthSpec spec;
    spec.cases = 4;
    spec.scans_per_case = 5;
    spec.seed = mix_seed(900, seed);
    Dataset d = generate(spec);
    DatasetIndex index = index_dataset(d);
    EncoderWeights w = EncoderWeights::random_init(cfg, mix_seed(901, seed));
    auto features = extract_features(d, w, cfg, Pooling::kMeanPool);

    double within = 0.0, across = 0.0;
    std::size_t nw = 0, na = 0;
    for (std::size_t a = 0; a < features.size(); ++a) {
      for (std::size_t b = a + 1; b < features.size(); ++b) {
        double dist = feature_distance(features[a], features[b]);
        if (features[a].case_id == features[b].case_id) {
          within += dist;
          ++nw;
        } else {
          across += dist;
          ++na;
        }
      }
    }
    if (within / static_cast<double>(nw) < across / static_cast<double>(na)) ++successes;
  }
  CHECK(successes >= 19);
}
