#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "oeseg/tensor.hpp"

namespace oeseg {

// One B-scan of a case. Images are HxWx1 with values in [0,1]; the mask is
// HxW binary and empty when the scan is unannotated.
struct BScanRecord {
  std::string case_id;
  int scan_index = 0;
  Tensor image;
  Tensor mask;

  bool has_mask() const { return !mask.empty(); }
};

using Dataset = std::vector<BScanRecord>;

// Canonical enumeration of a dataset: cases sorted lexicographically,
// scans sorted numerically within each case.
struct DatasetIndex {
  struct Case {
    std::string id;
    std::vector<int> scan_indices;
    std::vector<std::size_t> flat;  // positions in the flat order
  };
  std::vector<Case> cases;
  std::vector<std::pair<std::string, int>> flat;

  std::size_t size() const { return flat.size(); }
  std::size_t case_count() const { return cases.size(); }
  std::size_t flat_index(const std::string& case_id, int scan_index) const;
};

// Sorts records canonically and builds the index; duplicate (case, scan)
// pairs are rejected.
DatasetIndex index_dataset(Dataset& records);

struct SynthSpec {
  int cases = 8;
  int scans_per_case = 24;
  int image_side = 64;
  int lesion_count_min = 1;
  int lesion_count_max = 3;
  double lesion_radius_min = 6.0;
  double lesion_radius_max = 14.0;
  double drift = 0.03;  // within-case scan-to-scan perturbation
  double noise = 0.02;  // speckle amplitude
  std::uint64_t seed = 0;

  void validate() const;
};

// Layered OCT-like phantoms: per-case horizontal intensity bands plus
// elliptical lesions; adjacent scans of a case are drift-sized
// perturbations of the same layout. Masks are the exact lesion supports.
Dataset generate(const SynthSpec& spec);

// Whole-case train/test split, seeded.
struct CaseSplit {
  std::vector<std::string> train_cases;
  std::vector<std::string> test_cases;
};
CaseSplit split_cases(const DatasetIndex& index, double train_fraction, std::uint64_t seed);

Dataset filter_cases(const Dataset& records, const std::vector<std::string>& case_ids);

}  // namespace oeseg
