#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "oeseg/dataset.hpp"
#include "oeseg/encoder.hpp"
#include "oeseg/io.hpp"
#include "oeseg/train.hpp"

namespace oeseg {

// Budget token: "25%" resolves against the training-split size, a bare
// number is an absolute count.
std::size_t resolve_budget(const std::string& token, std::size_t m);

struct SweepConfig {
  std::vector<std::string> budgets = {"10%", "25%", "50%", "100%"};
  std::vector<Strategy> strategies = {Strategy::kCoreset, Strategy::kRandom,
                                      Strategy::kUniform};
  int seeds = 10;
  std::uint64_t base_seed = 0;
  double train_fraction = 0.5;
  Pooling pooling = Pooling::kMeanPool;
  EncoderConfig encoder = EncoderConfig::desk();
  TrainConfig train;
  SynthSpec synth;   // per-seed phantom data unless a fixed dataset is given
  int threads = 0;   // 0: OESEG_THREADS, then hardware concurrency

  // Masked-reconstruction pretraining of the per-seed encoder on the
  // unlabeled training split (skipped when 0 or when a fixed encoder is
  // supplied).
  int pretrain_epochs = 0;
  double pretrain_lr = 1e-3;
  double pretrain_mask_ratio = 0.75;

  // Evaluate on every k-th scan of each test case; adjacent scans are
  // near-duplicates, so a stride cuts cost without changing the picture.
  int eval_stride = 1;
};

// Runs budget x strategy x seed fine-tuning experiments and reports test
// DSC per run. Each seed is a full replicate (data, split, init,
// selection, training). With a fixed dataset the data is shared and only
// the pipeline reseeds. Rows come back in (budget, strategy, seed) order
// regardless of worker count.
std::vector<SweepRow> run_sweep(const SweepConfig& cfg, const Dataset* fixed_data,
                                const EncoderWeights* fixed_encoder, std::ostream* log);

int effective_worker_count(int requested);

}  // namespace oeseg
