#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oeseg/dataset.hpp"
#include "oeseg/features.hpp"

namespace oeseg {

enum class Strategy { kCoreset, kRandom, kUniform };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

// The ordered annotation set with its provenance.
struct SelectionManifest {
  Strategy strategy = Strategy::kCoreset;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, int>> selected;  // (case id, scan index), pick order
  Pooling pooling = Pooling::kMeanPool;
  std::string encoder_fingerprint;
};

// Pairwise Euclidean distances with a full cache for small instances;
// results are identical either way.
class DistanceProvider {
 public:
  explicit DistanceProvider(const std::vector<FeatureVector>& features,
                            std::size_t cache_limit = 4096);
  double operator()(std::size_t a, std::size_t b) const;
  std::size_t count() const { return features_->size(); }

 private:
  const std::vector<FeatureVector>* features_;
  std::vector<double> cache_;  // m*m when cached, empty otherwise
  std::size_t m_ = 0;
  bool cached_ = false;
};

// Per-step log of the greedy stage for property checks: the chosen
// sample's distance to the selected set and the best distance among the
// samples it beat.
struct SelectionTrace {
  struct Step {
    std::size_t chosen_flat;
    double chosen_min_dist;
    double best_other_min_dist;
  };
  std::vector<Step> steps;
};

// Index of the sample minimizing the summed distance to its case peers;
// ties break to the lowest index.
std::size_t case_medoid(const std::vector<FeatureVector>& case_features);

// Two-stage greedy selection: one medoid per case in canonical order, then
// repeated argmax-of-min-distance picks. Requires n < s < m; s == n is
// tolerated as the medoids-only boundary (with a warning on stderr).
SelectionManifest select_coreset(const DatasetIndex& index,
                                 const std::vector<FeatureVector>& features, std::size_t s,
                                 SelectionTrace* trace = nullptr);

SelectionManifest select_random(const DatasetIndex& index, std::size_t s, std::uint64_t seed);

// Largest-remainder per-case quotas (every case gets one when s >= n);
// within a case of size c and quota q, scans floor(i*c/q).
SelectionManifest select_uniform(const DatasetIndex& index, std::size_t s);

// Max over all samples of the distance to the nearest selected sample.
double coverage_radius(const SelectionManifest& manifest, const DatasetIndex& index,
                       const std::vector<FeatureVector>& features);

// Exhaustive optimal k-center radius; guarded to C(m,s) <= 1e6.
double brute_force_kcenter(const std::vector<FeatureVector>& features, std::size_t s);

}  // namespace oeseg
