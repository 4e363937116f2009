#include "oeseg/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "oeseg/error.hpp"
#include "oeseg/rng.hpp"

namespace oeseg {

std::size_t DatasetIndex::flat_index(const std::string& case_id, int scan_index) const {
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i].first == case_id && flat[i].second == scan_index) return i;
  }
  throw DataError("dataset index: unknown scan " + case_id + "/" + std::to_string(scan_index));
}

DatasetIndex index_dataset(Dataset& records) {
  std::sort(records.begin(), records.end(), [](const BScanRecord& a, const BScanRecord& b) {
    if (a.case_id != b.case_id) return a.case_id < b.case_id;
    return a.scan_index < b.scan_index;
  });
  DatasetIndex index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const BScanRecord& r = records[i];
    if (i > 0 && records[i - 1].case_id == r.case_id &&
        records[i - 1].scan_index == r.scan_index) {
      throw DataError("dataset: duplicate scan " + r.case_id + "/" +
                      std::to_string(r.scan_index));
    }
    if (index.cases.empty() || index.cases.back().id != r.case_id) {
      index.cases.push_back({r.case_id, {}, {}});
    }
    index.cases.back().scan_indices.push_back(r.scan_index);
    index.cases.back().flat.push_back(i);
    index.flat.emplace_back(r.case_id, r.scan_index);
  }
  return index;
}

void SynthSpec::validate() const {
  if (cases < 1 || scans_per_case < 1 || image_side < 8) {
    throw ConfigError("synth spec: cases, scans and image side must be positive");
  }
  if (lesion_count_min < 0 || lesion_count_max < lesion_count_min) {
    throw ConfigError("synth spec: empty lesion count range");
  }
  if (lesion_radius_min <= 0 || lesion_radius_max < lesion_radius_min) {
    throw ConfigError("synth spec: empty lesion radius range");
  }
  if (lesion_radius_max * 2.0 >= image_side) {
    throw ConfigError("synth spec: lesions too large for the image");
  }
  if (drift < 0 || noise < 0) throw ConfigError("synth spec: negative perturbation");
}

namespace {

struct Band {
  double boundary;  // lower edge as a fraction of height
  double intensity;
};

struct Lesion {
  double cx, cy, rx, ry;
  double contrast;
};

}  // namespace

Dataset generate(const SynthSpec& spec) {
  spec.validate();
  const double side = static_cast<double>(spec.image_side);
  Dataset out;
  out.reserve(static_cast<std::size_t>(spec.cases * spec.scans_per_case));

  // Shared anatomy: one banded layer template per dataset. Cases jitter
  // the template slightly; their lesion sets are what distinguishes them.
  Rng base_rng(mix_seed(spec.seed, 0xba5eULL));
  const int n_bands = 4 + static_cast<int>(base_rng.next_below(2));
  std::vector<Band> template_bands(static_cast<std::size_t>(n_bands));
  for (int b = 0; b < n_bands; ++b) {
    template_bands[static_cast<std::size_t>(b)].boundary =
        (b + base_rng.next_uniform(0.3, 0.7)) / n_bands;
    template_bands[static_cast<std::size_t>(b)].intensity = base_rng.next_uniform(0.1, 0.55);
  }
  std::sort(template_bands.begin(), template_bands.end(),
            [](const Band& a, const Band& b) { return a.boundary < b.boundary; });

  for (int ci = 0; ci < spec.cases; ++ci) {
    Rng case_rng(mix_seed(spec.seed, 0xca5eULL, static_cast<std::uint64_t>(ci)));

    std::vector<Band> bands = template_bands;
    for (Band& b : bands) {
      b.boundary += case_rng.next_uniform(-0.02, 0.02);
      b.intensity += case_rng.next_uniform(-0.04, 0.04);
    }

    int n_lesions = spec.lesion_count_min +
                    static_cast<int>(case_rng.next_below(
                        static_cast<std::uint64_t>(spec.lesion_count_max -
                                                   spec.lesion_count_min + 1)));
    double case_contrast = case_rng.next_uniform(0.25, 0.6);
    std::vector<Lesion> lesions(static_cast<std::size_t>(n_lesions));
    for (Lesion& l : lesions) {
      l.rx = case_rng.next_uniform(spec.lesion_radius_min, spec.lesion_radius_max);
      l.ry = case_rng.next_uniform(spec.lesion_radius_min, spec.lesion_radius_max);
      l.cx = case_rng.next_uniform(l.rx + 1.0, side - l.rx - 1.0);
      l.cy = case_rng.next_uniform(l.ry + 1.0, side - l.ry - 1.0);
      l.contrast = case_contrast * case_rng.next_uniform(0.8, 1.2);
    }

    // Scan-to-scan evolution follows a drift-scaled random walk, like
    // consecutive B-scans sweeping through a volume: adjacent scans are
    // near-duplicates while distant scans of the same case genuinely
    // differ. With drift zero every scan reproduces the case layout.
    struct LesionWalk {
      double x = 0, y = 0, rx = 0, ry = 0;
    };
    std::vector<LesionWalk> walks(lesions.size());
    std::vector<double> band_walk(bands.size(), 0.0);

    for (int si = 0; si < spec.scans_per_case; ++si) {
      Rng scan_rng(mix_seed(spec.seed, 0x5ca9ULL, static_cast<std::uint64_t>(ci),
                            static_cast<std::uint64_t>(si)));
      std::vector<Band> b2 = bands;
      for (std::size_t b = 0; b < b2.size(); ++b) {
        band_walk[b] += scan_rng.next_uniform(-1.0, 1.0);
        b2[b].boundary += spec.drift * 0.2 * band_walk[b];
      }
      std::vector<Lesion> l2 = lesions;
      for (std::size_t li = 0; li < l2.size(); ++li) {
        LesionWalk& w = walks[li];
        w.x += scan_rng.next_uniform(-1.0, 1.0);
        w.y += scan_rng.next_uniform(-1.0, 1.0);
        w.rx += scan_rng.next_uniform(-1.0, 1.0);
        w.ry += scan_rng.next_uniform(-1.0, 1.0);
        Lesion& l = l2[li];
        l.rx = std::min(std::max(l.rx * (1.0 + spec.drift * w.rx), 2.0), side / 2.0 - 1.0);
        l.ry = std::min(std::max(l.ry * (1.0 + spec.drift * w.ry), 2.0), side / 2.0 - 1.0);
        // Keep the center inside the image so the mask stays nonempty.
        l.cx = std::min(std::max(l.cx + spec.drift * side * w.x, 2.0), side - 2.0);
        l.cy = std::min(std::max(l.cy + spec.drift * side * w.y, 2.0), side - 2.0);
      }

      std::vector<double> img(static_cast<std::size_t>(spec.image_side * spec.image_side));
      std::vector<double> msk(img.size(), 0.0);
      for (int y = 0; y < spec.image_side; ++y) {
        double fy = (y + 0.5) / side;
        double base = b2.back().intensity;
        for (const Band& b : b2) {
          if (fy < b.boundary) {
            base = b.intensity;
            break;
          }
        }
        for (int x = 0; x < spec.image_side; ++x) {
          std::size_t at = static_cast<std::size_t>(y * spec.image_side + x);
          double v = base;
          for (const Lesion& l : l2) {
            double dx = (x + 0.5 - l.cx) / l.rx;
            double dy = (y + 0.5 - l.cy) / l.ry;
            double r2 = dx * dx + dy * dy;
            if (r2 <= 1.0) {
              v += l.contrast * (1.0 - r2);
              msk[at] = 1.0;
            }
          }
          v += spec.noise * scan_rng.next_uniform(-1.0, 1.0);
          img[at] = std::min(1.0, std::max(0.0, v));
        }
      }

      BScanRecord rec;
      rec.case_id = "case_" + std::string(ci < 10 ? "00" : (ci < 100 ? "0" : "")) +
                    std::to_string(ci);
      rec.scan_index = si;
      rec.image = Tensor({static_cast<std::size_t>(spec.image_side),
                          static_cast<std::size_t>(spec.image_side), 1},
                         std::move(img));
      rec.mask = Tensor({static_cast<std::size_t>(spec.image_side),
                         static_cast<std::size_t>(spec.image_side)},
                        std::move(msk));
      out.push_back(std::move(rec));
    }
  }
  return out;
}

CaseSplit split_cases(const DatasetIndex& index, double train_fraction, std::uint64_t seed) {
  if (index.case_count() < 2) throw ConfigError("split: need at least two cases");
  if (train_fraction <= 0.0 || train_fraction >= 1.0) {
    throw ConfigError("split: train fraction must lie in (0, 1)");
  }
  std::vector<std::string> ids;
  for (const auto& c : index.cases) ids.push_back(c.id);
  Rng rng(mix_seed(seed, 0x5b117ULL));
  rng.shuffle(ids);
  std::size_t n = ids.size();
  std::size_t n_train = static_cast<std::size_t>(
      std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::max<std::size_t>(1, std::min(n - 1, n_train));
  CaseSplit split;
  split.train_cases.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
  split.test_cases.assign(ids.begin() + static_cast<long>(n_train), ids.end());
  std::sort(split.train_cases.begin(), split.train_cases.end());
  std::sort(split.test_cases.begin(), split.test_cases.end());
  return split;
}

Dataset filter_cases(const Dataset& records, const std::vector<std::string>& case_ids) {
  Dataset out;
  for (const BScanRecord& r : records) {
    if (std::find(case_ids.begin(), case_ids.end(), r.case_id) != case_ids.end()) {
      out.push_back(r);
    }
  }
  return out;
}

}  // namespace oeseg
