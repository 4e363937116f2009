#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "oeseg/coreset.hpp"
#include "oeseg/error.hpp"
#include "oracles.hpp"

using namespace oeseg;

namespace {

// Builds a dataset index plus aligned 1-D (or K-D) features from raw
// values, one case per outer vector.
struct Instance {
  Dataset records;
  DatasetIndex index;
  std::vector<FeatureVector> features;
};

Instance make_instance(const std::vector<std::vector<std::vector<double>>>& cases) {
  Instance inst;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    for (std::size_t s = 0; s < cases[c].size(); ++s) {
      BScanRecord r;
      r.case_id = "case_" + std::string(c < 10 ? "0" : "") + std::to_string(c);
      r.scan_index = static_cast<int>(s);
      r.image = Tensor::zeros({8, 8, 1});
      inst.records.push_back(std::move(r));
    }
  }
  inst.index = index_dataset(inst.records);
  for (std::size_t i = 0; i < inst.index.flat.size(); ++i) {
    const auto& [case_id, scan] = inst.index.flat[i];
    std::size_t c = 0;
    while (inst.index.cases[c].id != case_id) ++c;
    FeatureVector f;
    f.values = Tensor({cases[c][static_cast<std::size_t>(scan)].size()},
                      cases[c][static_cast<std::size_t>(scan)]);
    f.case_id = case_id;
    f.scan_index = scan;
    inst.features.push_back(std::move(f));
  }
  return inst;
}

Instance random_instance(Rng& rng, std::size_t n_cases, std::size_t max_case, std::size_t dim) {
  std::vector<std::vector<std::vector<double>>> cases;
  for (std::size_t c = 0; c < n_cases; ++c) {
    std::size_t size = 1 + rng.next_below(max_case);
    std::vector<std::vector<double>> scans;
    for (std::size_t s = 0; s < size; ++s) {
      std::vector<double> v(dim);
      for (double& x : v) x = rng.next_uniform(-5, 5);
      scans.push_back(std::move(v));
    }
    cases.push_back(std::move(scans));
  }
  return make_instance(cases);
}

// Direct transcription of the two-phase selection: per-case distance-sum
// minimizers, then repeated argmax over a freshly rebuilt distance matrix.
std::vector<std::pair<std::string, int>> naive_algorithm1(
    const DatasetIndex& index, const std::vector<FeatureVector>& features, std::size_t s) {
  std::vector<std::size_t> u;  // remaining flat indices, canonical order
  for (std::size_t i = 0; i < index.size(); ++i) u.push_back(i);
  std::vector<std::size_t> sel;

  for (const auto& c : index.cases) {
    std::vector<double> sums(c.flat.size(), 0.0);
    for (std::size_t j = 0; j < c.flat.size(); ++j) {
      for (std::size_t a = 0; a < c.flat.size(); ++a) {
        sums[j] += feature_distance(features[c.flat[j]], features[c.flat[a]]);
      }
    }
    std::size_t y = 0;
    for (std::size_t j = 1; j < sums.size(); ++j) {
      if (sums[j] < sums[y]) y = j;
    }
    std::size_t flat = c.flat[y];
    u.erase(std::find(u.begin(), u.end(), flat));
    sel.push_back(flat);
  }

  for (std::size_t i = index.case_count(); i < s; ++i) {
    std::vector<std::vector<double>> dmat(u.size(), std::vector<double>(sel.size()));
    for (std::size_t a = 0; a < u.size(); ++a) {
      for (std::size_t b = 0; b < sel.size(); ++b) {
        dmat[a][b] = feature_distance(features[u[a]], features[sel[b]]);
      }
    }
    std::size_t z = 0;
    double best = -1.0;
    for (std::size_t a = 0; a < u.size(); ++a) {
      double mn = dmat[a][0];
      for (std::size_t b = 1; b < sel.size(); ++b) mn = std::min(mn, dmat[a][b]);
      if (mn > best) {
        best = mn;
        z = a;
      }
    }
    std::size_t flat = u[z];
    u.erase(u.begin() + static_cast<long>(z));
    sel.push_back(flat);
  }

  std::vector<std::pair<std::string, int>> out;
  for (std::size_t f : sel) out.push_back(index.flat[f]);
  return out;
}

}  // namespace

TEST_CASE("feature distance basics") {
  FeatureVector a, b;
  a.values = Tensor({2}, {0, 0});
  b.values = Tensor({2}, {3, 4});
  CHECK(feature_distance(a, b) == 5.0);
  CHECK(feature_distance(a, a) == 0.0);

  FeatureVector c;
  c.values = Tensor({3}, {1, 2, 3});
  CHECK_THROWS_AS(feature_distance(a, c), ContractError);

  Rng rng(701);
  for (int trial = 0; trial < 100; ++trial) {
    FeatureVector x, y, z;
    x.values = oracle::random_tensor(rng, {6});
    y.values = oracle::random_tensor(rng, {6});
    z.values = oracle::random_tensor(rng, {6});
    CHECK(feature_distance(x, z) <= feature_distance(x, y) + feature_distance(y, z) + 1e-12);
  }
}

TEST_CASE("case_medoid selects the distance-sum minimizer") {
  auto fv = [](double v) {
    FeatureVector f;
    f.values = Tensor({1}, {v});
    return f;
  };
  std::vector<FeatureVector> feats = {fv(0), fv(1), fv(10)};
  CHECK(case_medoid(feats) == 1);  // sums 11, 10, 19

  std::vector<FeatureVector> single = {fv(3.3)};
  CHECK(case_medoid(single) == 0);

  std::vector<FeatureVector> tie = {fv(0), fv(2)};  // both sum to 2
  CHECK(case_medoid(tie) == 0);

  CHECK_THROWS_AS(case_medoid({}), ContractError);
}

TEST_CASE("select_coreset hand trace") {
  Instance inst = make_instance({{{0}, {1}, {5}, {6}}});
  SelectionManifest m = select_coreset(inst.index, inst.features, 2);
  REQUIRE(m.selected.size() == 2);
  CHECK(m.selected[0].second == 1);  // medoid: value 1
  CHECK(m.selected[1].second == 3);  // farthest from it: value 6
}

TEST_CASE("select_coreset budget boundary and errors") {
  Instance inst = make_instance({{{0}, {1}}, {{10}, {11}, {12}}});
  // s == n: medoids only.
  SelectionManifest m = select_coreset(inst.index, inst.features, 2);
  CHECK(m.selected.size() == 2);
  CHECK(m.selected[0].first == "case_00");
  CHECK(m.selected[1].first == "case_01");
  CHECK(m.selected[1].second == 1);  // middle value 11 is the medoid

  CHECK_THROWS_AS(select_coreset(inst.index, inst.features, 1), BudgetError);
  CHECK_THROWS_AS(select_coreset(inst.index, inst.features, 5), BudgetError);
}

TEST_CASE("select_coreset equals the naive trace on random instances") {
  Rng rng(702);
  for (int trial = 0; trial < 40; ++trial) {
    std::size_t n = 1 + rng.next_below(4);
    Instance inst = random_instance(rng, n, 8, 3);
    std::size_t m = inst.index.size();
    if (m <= n + 1) continue;
    std::size_t s = n + 1 + rng.next_below(m - n - 1);
    SelectionManifest got = select_coreset(inst.index, inst.features, s);
    auto expect = naive_algorithm1(inst.index, inst.features, s);
    CHECK(got.selected == expect);
  }
}

TEST_CASE("greedy max-min law holds at every stage-2 step") {
  Rng rng(703);
  Instance inst = random_instance(rng, 3, 10, 2);
  std::size_t n = inst.index.case_count(), m = inst.index.size();
  if (m > n + 2) {
    std::size_t s = std::min(m - 1, n + 4);
    SelectionTrace trace;
    select_coreset(inst.index, inst.features, s, &trace);
    CHECK(trace.steps.size() == s - n);
    for (const auto& step : trace.steps) {
      CHECK(step.chosen_min_dist >= step.best_other_min_dist);
    }
  }
}

TEST_CASE("selected set is invariant under input permutation for distinct distances") {
  Rng rng(704);
  for (int trial = 0; trial < 10; ++trial) {
    Instance inst = random_instance(rng, 2, 6, 2);
    std::size_t n = inst.index.case_count(), m = inst.index.size();
    if (m <= n + 1) continue;
    std::size_t s = n + 1 + rng.next_below(m - n - 1);
    SelectionManifest a = select_coreset(inst.index, inst.features, s);

    // Relabel scans within each case in reverse; canonical order changes,
    // the feature multiset does not.
    Dataset records2 = inst.records;
    std::vector<FeatureVector> feats2 = inst.features;
    std::vector<int> max_scan(inst.index.case_count(), 0);
    for (std::size_t c = 0; c < inst.index.cases.size(); ++c) {
      max_scan[c] = *std::max_element(inst.index.cases[c].scan_indices.begin(),
                                      inst.index.cases[c].scan_indices.end());
    }
    auto relabel = [&](const std::string& case_id, int scan) {
      std::size_t c = 0;
      while (inst.index.cases[c].id != case_id) ++c;
      return max_scan[c] - scan;
    };
    for (auto& r : records2) r.scan_index = relabel(r.case_id, r.scan_index);
    for (auto& f : feats2) f.scan_index = relabel(f.case_id, f.scan_index);
    DatasetIndex index2 = index_dataset(records2);
    std::sort(feats2.begin(), feats2.end(), [](const FeatureVector& x, const FeatureVector& y) {
      if (x.case_id != y.case_id) return x.case_id < y.case_id;
      return x.scan_index < y.scan_index;
    });
    SelectionManifest b = select_coreset(index2, feats2, s);

    // Compare as sets of feature values (scan labels differ).
    auto key = [&](const std::vector<FeatureVector>& fs, const DatasetIndex& idx,
                   const std::pair<std::string, int>& sel) {
      const FeatureVector& f = fs[idx.flat_index(sel.first, sel.second)];
      return std::vector<double>(f.values.data().begin(), f.values.data().end());
    };
    std::vector<std::vector<double>> ka, kb;
    for (const auto& sel : a.selected) ka.push_back(key(inst.features, inst.index, sel));
    for (const auto& sel : b.selected) kb.push_back(key(feats2, index2, sel));
    std::sort(ka.begin(), ka.end());
    std::sort(kb.begin(), kb.end());
    CHECK(ka == kb);
  }
}

TEST_CASE("select_random sampling behaviour") {
  Rng rng(705);
  Instance inst = random_instance(rng, 2, 5, 1);
  std::size_t m = inst.index.size();
  SelectionManifest all = select_random(inst.index, m, 1);
  CHECK(all.selected.size() == m);

  SelectionManifest a = select_random(inst.index, std::min<std::size_t>(3, m), 42);
  SelectionManifest b = select_random(inst.index, std::min<std::size_t>(3, m), 42);
  CHECK(a.selected == b.selected);

  CHECK_THROWS_AS(select_random(inst.index, 0, 1), BudgetError);
  CHECK_THROWS_AS(select_random(inst.index, m + 1, 1), BudgetError);
}

TEST_CASE("select_random frequencies are unbiased") {
  Instance inst = make_instance({{{0}, {1}, {2}, {3}, {4}, {5}, {6}, {7}, {8}, {9}}});
  std::vector<int> hits(10, 0);
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    SelectionManifest m = select_random(inst.index, 3, static_cast<std::uint64_t>(t));
    for (const auto& [case_id, scan] : m.selected) hits[static_cast<std::size_t>(scan)]++;
  }
  double sigma = std::sqrt(0.3 * 0.7 / trials);
  for (int h : hits) {
    double freq = static_cast<double>(h) / trials;
    CHECK(std::abs(freq - 0.3) < 5.0 * sigma);
  }
}

TEST_CASE("select_uniform stride rule and apportionment") {
  {
    std::vector<std::vector<std::vector<double>>> one_case(1);
    for (int i = 0; i < 10; ++i) one_case[0].push_back({static_cast<double>(i)});
    Instance inst = make_instance(one_case);
    SelectionManifest m = select_uniform(inst.index, 2);
    REQUIRE(m.selected.size() == 2);
    CHECK(m.selected[0].second == 0);
    CHECK(m.selected[1].second == 5);

    SelectionManifest q1 = select_uniform(inst.index, 1);
    CHECK(q1.selected[0].second == 0);
  }
  {
    Rng rng(706);
    for (int trial = 0; trial < 20; ++trial) {
      Instance inst = random_instance(rng, 1 + rng.next_below(5), 9, 1);
      std::size_t m = inst.index.size();
      std::size_t s = 1 + rng.next_below(m);
      SelectionManifest sel = select_uniform(inst.index, s);
      CHECK(sel.selected.size() == s);
      std::sort(sel.selected.begin(), sel.selected.end());
      CHECK(std::adjacent_find(sel.selected.begin(), sel.selected.end()) == sel.selected.end());
      if (s >= inst.index.case_count()) {
        for (const auto& c : inst.index.cases) {
          bool covered = false;
          for (const auto& [case_id, scan] : sel.selected) {
            if (case_id == c.id) covered = true;
          }
          CHECK(covered);
        }
      }
    }
  }
}

TEST_CASE("coverage radius") {
  Instance inst = make_instance({{{0}, {10}}});
  SelectionManifest m;
  m.strategy = Strategy::kRandom;
  m.budget = 1;
  m.selected = {{"case_00", 0}};
  CHECK(coverage_radius(m, inst.index, inst.features) == 10.0);

  SelectionManifest all = select_random(inst.index, 2, 0);
  CHECK(coverage_radius(all, inst.index, inst.features) == 0.0);

  // Brute-force recomputation on random instances.
  Rng rng(707);
  for (int trial = 0; trial < 10; ++trial) {
    Instance r = random_instance(rng, 2, 5, 2);
    std::size_t s = 1 + rng.next_below(r.index.size());
    SelectionManifest sel = select_random(r.index, s, static_cast<std::uint64_t>(trial));
    double got = coverage_radius(sel, r.index, r.features);
    double expect = 0.0;
    for (std::size_t x = 0; x < r.features.size(); ++x) {
      double best = 1e300;
      for (const auto& [cid, scan] : sel.selected) {
        best = std::min(best, feature_distance(r.features[x],
                                               r.features[r.index.flat_index(cid, scan)]));
      }
      expect = std::max(expect, best);
    }
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("brute_force_kcenter exhaustive optimum") {
  Instance inst = make_instance({{{0}, {1}, {2}, {3}}});
  CHECK(brute_force_kcenter(inst.features, 2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(brute_force_kcenter(inst.features, 4) == 0.0);

  // Optimal never exceeds the greedy radius.
  Rng rng(708);
  for (int trial = 0; trial < 10; ++trial) {
    Instance r = random_instance(rng, 1, 10, 2);
    std::size_t m = r.index.size();
    if (m < 4) continue;
    std::size_t s = 2 + rng.next_below(2);
    SelectionManifest greedy = select_coreset(r.index, r.features, s);
    double g = coverage_radius(greedy, r.index, r.features);
    double opt = brute_force_kcenter(r.features, s);
    CHECK(opt <= g + 1e-12);
  }

  // Guard against intractable instances.
  std::vector<std::vector<std::vector<double>>> vals(1);
  for (int i = 0; i < 40; ++i) vals[0].push_back({static_cast<double>(i)});
  Instance wide = make_instance(vals);
  CHECK_THROWS_AS(brute_force_kcenter(wide.features, 20), GuardError);
}

TEST_CASE("single-case greedy stays within twice the optimal radius") {
  Rng rng(710);
  int checked = 0;
  for (int trial = 0; trial < 30; ++trial) {
    Instance inst = random_instance(rng, 1, 12, 2);
    std::size_t m = inst.index.size();
    if (m < 4) continue;
    std::size_t s = 2 + rng.next_below(std::min<std::size_t>(3, m - 2));
    SelectionManifest greedy = select_coreset(inst.index, inst.features, s);
    double g = coverage_radius(greedy, inst.index, inst.features);
    double opt = brute_force_kcenter(inst.features, s);
    CHECK(g <= 2.0 * opt + 1e-9);
    ++checked;
  }
  CHECK(checked > 10);
}
