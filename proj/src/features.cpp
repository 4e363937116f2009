#include "oeseg/features.hpp"

#include <cmath>

#include "oeseg/error.hpp"
#include "oeseg/patch.hpp"

namespace oeseg {

std::string to_string(Pooling p) {
  return p == Pooling::kMeanPool ? "mean-pool" : "flatten";
}

Pooling parse_pooling(const std::string& s) {
  if (s == "mean-pool" || s == "mean") return Pooling::kMeanPool;
  if (s == "flatten") return Pooling::kFlatten;
  throw ConfigError("unknown pooling '" + s + "'");
}

FeatureVector extract_feature(const BScanRecord& scan, EncoderWeights& weights,
                              const EncoderConfig& cfg, Pooling pooling) {
  Tensor image = scan.image;
  if (image.rank() != 3) throw DimensionError("extract_feature: image must be HxWxC");
  if (image.dim(2) != static_cast<std::size_t>(cfg.channels)) {
    if (image.dim(2) == 1 && cfg.channels > 1) {
      image = replicate_channels(image, static_cast<std::size_t>(cfg.channels));
    } else {
      throw DimensionError("extract_feature: channel count incompatible with the preset");
    }
  }
  PatchSequence seq = patchify(image, static_cast<std::size_t>(cfg.patch));
  if (seq.count() != cfg.tokens()) {
    throw DimensionError("extract_feature: image size incompatible with the preset grid");
  }
  MaskPlan none = sample_mask(seq.count(), 0.0, 0);

  Tape tape;
  EncoderIds ids = register_encoder(tape, weights, false, nullptr);
  ValueId tokens = embed_visible(tape, seq, none, ids.embed_projection, ids.embed_positions);
  auto taps = encode(tape, tokens, ids, cfg);
  const Tensor& final_tap = tape.value(taps.at(cfg.blocks));

  std::size_t n = final_tap.dim(0), d = final_tap.dim(1);
  FeatureVector f;
  f.case_id = scan.case_id;
  f.scan_index = scan.scan_index;
  f.pooling = pooling;
  if (pooling == Pooling::kMeanPool) {
    std::vector<double> pooled(d, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) pooled[c] += final_tap.at2(r, c);
    }
    for (double& v : pooled) v /= static_cast<double>(n);
    f.values = Tensor({d}, std::move(pooled));
  } else {
    f.values = Tensor({n * d}, std::vector<double>(final_tap.data().begin(),
                                                   final_tap.data().end()));
  }
  return f;
}

std::vector<FeatureVector> extract_features(const Dataset& records, EncoderWeights& weights,
                                            const EncoderConfig& cfg, Pooling pooling) {
  std::vector<FeatureVector> out;
  out.reserve(records.size());
  for (const BScanRecord& r : records) {
    out.push_back(extract_feature(r, weights, cfg, pooling));
  }
  return out;
}

double feature_distance(const FeatureVector& a, const FeatureVector& b) {
  if (a.values.size() != b.values.size() || a.pooling != b.pooling) {
    throw ContractError("feature_distance: dimension or pooling mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    double d = a.values[i] - b.values[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace oeseg
