#pragma once

#include <string>
#include <vector>

#include "oeseg/dataset.hpp"
#include "oeseg/encoder.hpp"

namespace oeseg {

enum class Pooling { kMeanPool, kFlatten };

std::string to_string(Pooling p);
Pooling parse_pooling(const std::string& s);

// Per-scan embedding used for selection distances.
struct FeatureVector {
  Tensor values;  // K
  std::string case_id;
  int scan_index = 0;
  Pooling pooling = Pooling::kMeanPool;
};

// Full (unmasked) patch sequence through the encoder; the final tap is
// mean-pooled over tokens (K = D) or flattened (K = N*D).
FeatureVector extract_feature(const BScanRecord& scan, EncoderWeights& weights,
                              const EncoderConfig& cfg, Pooling pooling);

std::vector<FeatureVector> extract_features(const Dataset& records, EncoderWeights& weights,
                                            const EncoderConfig& cfg, Pooling pooling);

// Euclidean distance in feature space.
double feature_distance(const FeatureVector& a, const FeatureVector& b);

}  // namespace oeseg
