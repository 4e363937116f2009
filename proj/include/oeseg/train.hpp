#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oeseg/coreset.hpp"
#include "oeseg/dataset.hpp"
#include "oeseg/encoder.hpp"
#include "oeseg/segdec.hpp"

namespace oeseg {

enum class FreezePolicy { kDecoderOnly, kAll };

std::string to_string(FreezePolicy p);
FreezePolicy parse_freeze_policy(const std::string& s);

struct TrainConfig {
  double learning_rate = 0.5e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 4;
  double lr_decay_factor = 0.9;
  int lr_patience = 5;          // evaluations without improvement before a decay
  int early_stop_patience = 10; // epochs without improvement before stopping
  double flip_probability = 0.5;
  double validation_fraction = 0.2;
  FreezePolicy freeze_policy = FreezePolicy::kDecoderOnly;
  std::uint64_t seed = 0;
  int max_epochs = 100;

  void validate() const;
};

struct TrainHistory {
  struct Epoch {
    double train_loss;
    double val_loss;
    double learning_rate;
    double seconds;
  };
  std::vector<Epoch> epochs;
  std::string stop_reason;  // "early_stop" | "max_epochs"
  int best_epoch = 0;       // 1-based

  // Equality over the deterministic content (wall-clock excluded).
  bool same_trace(const TrainHistory& other) const;
};

// Optimizer state aligned with a fixed parameter order.
struct AdamState {
  std::vector<Tensor> m, v;
};

// One bias-corrected Adam update over an aligned parameter/gradient list.
void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state, int t, const TrainConfig& cfg);

// Learning rate in effect after the given validation-loss sequence: each
// run of lr_patience evaluations without improvement multiplies the rate
// by lr_decay_factor and restarts the count.
double lr_schedule(const std::vector<double>& val_losses, const TrainConfig& cfg);

// True exactly when the best validation loss is at least
// early_stop_patience epochs old.
bool early_stop(const std::vector<double>& val_losses, const TrainConfig& cfg);

Tensor mirror_horizontal(const Tensor& t);

// With probability flip_probability (under the given stream seed) mirrors
// image and mask together.
std::pair<Tensor, Tensor> augment_flip(const Tensor& image, const Tensor& mask,
                                       std::uint64_t seed, double flip_probability);

// Encoder taps for one image, reshaped to D x h x w maps.
std::map<int, Tensor> encoder_taps(EncoderWeights& enc, const Tensor& image);

SegPrediction segment_scan(EncoderWeights& enc, SegDecoderWeights& dec, const Tensor& image);

struct FinetuneResult {
  EncoderWeights encoder;
  SegDecoderWeights decoder;
  TrainHistory history;
};

// Phase-4 fine-tuning on the manifest's annotated scans: seeded train/val
// split, Adam on seg_loss over the trainable scope, plateau decay, early
// stopping; returns the best-validation snapshot.
FinetuneResult finetune(const EncoderWeights& enc, const SegDecoderWeights& dec,
                        const SelectionManifest& manifest, const Dataset& dataset,
                        const TrainConfig& cfg);

// Dice similarity of two binary masks; 1 when both are empty.
double dsc(const Tensor& pred_mask, const Tensor& gt_mask);

struct EvalResult {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::vector<double> per_scan;
  std::vector<std::pair<std::string, double>> per_case;
};

// Per-scan DSC after thresholding; per-case means are also reported for
// case-level aggregation.
EvalResult evaluate(EncoderWeights& enc, SegDecoderWeights& dec, const Dataset& test_scans,
                    double threshold = 0.5);

}  // namespace oeseg
