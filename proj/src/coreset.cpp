#include "oeseg/coreset.hpp"

#include <algorithm>
#include <iostream>
#include <limits>

#include "oeseg/error.hpp"
#include "oeseg/rng.hpp"

namespace oeseg {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kCoreset:
      return "coreset";
    case Strategy::kRandom:
      return "random";
    case Strategy::kUniform:
      return "uniform";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  if (s == "coreset") return Strategy::kCoreset;
  if (s == "random") return Strategy::kRandom;
  if (s == "uniform") return Strategy::kUniform;
  throw ConfigError("unknown strategy '" + s + "'");
}

DistanceProvider::DistanceProvider(const std::vector<FeatureVector>& features,
                                   std::size_t cache_limit)
    : features_(&features), m_(features.size()) {
  if (m_ <= cache_limit) {
    cache_.assign(m_ * m_, 0.0);
    for (std::size_t a = 0; a < m_; ++a) {
      for (std::size_t b = a + 1; b < m_; ++b) {
        double d = feature_distance(features[a], features[b]);
        cache_[a * m_ + b] = d;
        cache_[b * m_ + a] = d;
      }
    }
    cached_ = true;
  }
}

double DistanceProvider::operator()(std::size_t a, std::size_t b) const {
  if (cached_) return cache_[a * m_ + b];
  return feature_distance((*features_)[a], (*features_)[b]);
}

namespace {

void check_alignment(const DatasetIndex& index, const std::vector<FeatureVector>& features) {
  if (features.size() != index.size()) {
    throw ContractError("selection: feature list does not match the dataset index");
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].case_id != index.flat[i].first ||
        features[i].scan_index != index.flat[i].second) {
      throw ContractError("selection: features are not in canonical index order");
    }
  }
}

}  // namespace

std::size_t case_medoid(const std::vector<FeatureVector>& case_features) {
  if (case_features.empty()) throw ContractError("case_medoid: empty case");
  std::size_t best = 0;
  double best_sum = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < case_features.size(); ++j) {
    double sum = 0.0;
    for (std::size_t a = 0; a < case_features.size(); ++a) {
      sum += feature_distance(case_features[j], case_features[a]);
    }
    if (sum < best_sum) {
      best_sum = sum;
      best = j;
    }
  }
  return best;
}

SelectionManifest select_coreset(const DatasetIndex& index,
                                 const std::vector<FeatureVector>& features, std::size_t s,
                                 SelectionTrace* trace) {
  check_alignment(index, features);
  std::size_t m = index.size(), n = index.case_count();
  if (s < n || s >= m) {
    throw BudgetError("select_coreset: budget must satisfy n < s < m (n=" + std::to_string(n) +
                      ", m=" + std::to_string(m) + ", s=" + std::to_string(s) + ")");
  }
  if (s == n) {
    std::cerr << "select_coreset: budget equals the case count; emitting per-case medoids only\n";
  }

  DistanceProvider dist(features);
  std::vector<bool> selected(m, false);
  std::vector<std::size_t> picks;
  picks.reserve(s);

  // Stage 1: per-case medoids in canonical case order.
  for (const DatasetIndex::Case& c : index.cases) {
    std::size_t best = 0;
    double best_sum = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c.flat.size(); ++j) {
      double sum = 0.0;
      for (std::size_t a = 0; a < c.flat.size(); ++a) sum += dist(c.flat[j], c.flat[a]);
      if (sum < best_sum) {
        best_sum = sum;
        best = j;
      }
    }
    selected[c.flat[best]] = true;
    picks.push_back(c.flat[best]);
  }

  // Stage 2: farthest-first on the min-distance to the selected set.
  std::vector<double> min_dist(m, std::numeric_limits<double>::infinity());
  for (std::size_t x = 0; x < m; ++x) {
    for (std::size_t p : picks) min_dist[x] = std::min(min_dist[x], dist(x, p));
  }
  for (std::size_t step = n; step < s; ++step) {
    std::size_t best = m;
    double best_d = -1.0;
    double runner_up = -1.0;
    for (std::size_t x = 0; x < m; ++x) {
      if (selected[x]) continue;
      if (min_dist[x] > best_d) {
        runner_up = best_d;
        best_d = min_dist[x];
        best = x;
      } else {
        runner_up = std::max(runner_up, min_dist[x]);
      }
    }
    selected[best] = true;
    picks.push_back(best);
    if (trace) trace->steps.push_back({best, best_d, runner_up});
    for (std::size_t x = 0; x < m; ++x) {
      if (!selected[x]) min_dist[x] = std::min(min_dist[x], dist(x, best));
    }
  }

  SelectionManifest manifest;
  manifest.strategy = Strategy::kCoreset;
  manifest.budget = s;
  manifest.seed = 0;
  manifest.pooling = features.front().pooling;
  for (std::size_t p : picks) manifest.selected.push_back(index.flat[p]);
  return manifest;
}

SelectionManifest select_random(const DatasetIndex& index, std::size_t s, std::uint64_t seed) {
  std::size_t m = index.size();
  if (s == 0 || s > m) throw BudgetError("select_random: budget outside 1..m");
  Rng rng(mix_seed(seed, 0x72616e64ULL));
  auto picks = rng.sample_without_replacement(static_cast<std::uint32_t>(m),
                                              static_cast<std::uint32_t>(s));
  SelectionManifest manifest;
  manifest.strategy = Strategy::kRandom;
  manifest.budget = s;
  manifest.seed = seed;
  for (std::uint32_t p : picks) manifest.selected.push_back(index.flat[p]);
  return manifest;
}

SelectionManifest select_uniform(const DatasetIndex& index, std::size_t s) {
  std::size_t m = index.size(), n = index.case_count();
  if (s == 0 || s > m) throw BudgetError("select_uniform: budget outside 1..m");

  // Largest-remainder apportionment of quotas proportional to case sizes;
  // when the budget covers every case, one pick per case is reserved first.
  std::vector<std::size_t> quota(n, 0);
  std::size_t distribute = s;
  if (s >= n) {
    for (std::size_t c = 0; c < n; ++c) quota[c] = 1;
    distribute = s - n;
  }
  std::vector<double> exact(n);
  std::vector<std::size_t> base(n);
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t size = index.cases[c].flat.size();
    std::size_t room = size - quota[c];
    exact[c] = static_cast<double>(distribute) * static_cast<double>(size) /
               static_cast<double>(m);
    base[c] = std::min(room, static_cast<std::size_t>(exact[c]));
    assigned += base[c];
  }
  // Hand out the remainder by the largest fractional part, lowest case
  // index on ties, skipping full cases.
  std::vector<std::size_t> order(n);
  for (std::size_t c = 0; c < n; ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return exact[a] - static_cast<double>(base[a]) > exact[b] - static_cast<double>(base[b]);
  });
  std::size_t left = distribute - assigned;
  while (left > 0) {
    bool progressed = false;
    for (std::size_t c : order) {
      if (left == 0) break;
      std::size_t size = index.cases[c].flat.size();
      if (quota[c] + base[c] < size) {
        ++base[c];
        --left;
        progressed = true;
      }
    }
    if (!progressed) throw BudgetError("select_uniform: budget exceeds dataset size");
  }

  SelectionManifest manifest;
  manifest.strategy = Strategy::kUniform;
  manifest.budget = s;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t q = quota[c] + base[c];
    std::size_t size = index.cases[c].flat.size();
    for (std::size_t i = 0; i < q; ++i) {
      std::size_t local = i * size / q;  // floor(i*c/q) stride rule
      manifest.selected.push_back(index.flat[index.cases[c].flat[local]]);
    }
  }
  return manifest;
}

double coverage_radius(const SelectionManifest& manifest, const DatasetIndex& index,
                       const std::vector<FeatureVector>& features) {
  check_alignment(index, features);
  if (manifest.selected.empty()) throw ContractError("coverage_radius: empty manifest");
  std::vector<std::size_t> centers;
  for (const auto& [case_id, scan] : manifest.selected) {
    centers.push_back(index.flat_index(case_id, scan));
  }
  double radius = 0.0;
  for (std::size_t x = 0; x < features.size(); ++x) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c : centers) best = std::min(best, feature_distance(features[x], features[c]));
    radius = std::max(radius, best);
  }
  return radius;
}

double brute_force_kcenter(const std::vector<FeatureVector>& features, std::size_t s) {
  std::size_t m = features.size();
  if (s == 0 || s > m) throw BudgetError("brute_force_kcenter: budget outside 1..m");

  double combos = 1.0;
  for (std::size_t i = 0; i < s; ++i) {
    combos *= static_cast<double>(m - i) / static_cast<double>(i + 1);
    if (combos > 1e6) throw GuardError("brute_force_kcenter: C(m,s) exceeds 1e6");
  }

  DistanceProvider dist(features);
  std::vector<std::size_t> combo(s);
  for (std::size_t i = 0; i < s; ++i) combo[i] = i;
  double best = std::numeric_limits<double>::infinity();
  for (;;) {
    double radius = 0.0;
    for (std::size_t x = 0; x < m && radius < best; ++x) {
      double nearest = std::numeric_limits<double>::infinity();
      for (std::size_t c : combo) nearest = std::min(nearest, dist(x, c));
      radius = std::max(radius, nearest);
    }
    best = std::min(best, radius);

    // Next combination in lexicographic order.
    std::size_t i = s;
    while (i > 0 && combo[i - 1] == m - s + i - 1) --i;
    if (i == 0) break;
    ++combo[i - 1];
    for (std::size_t j = i; j < s; ++j) combo[j] = combo[j - 1] + 1;
  }
  return best;
}

}  // namespace oeseg
