#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "oeseg/encoder.hpp"
#include "oeseg/tape.hpp"
#include "oeseg/weights.hpp"

namespace oeseg {

enum class RunMode { kTrain, kInfer };

struct SegDecoderConfig {
  int input_width = 64;  // encoder width D at the taps
  int patch = 16;        // image side / feature grid ratio; determines stage count
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  static SegDecoderConfig from_encoder(const EncoderConfig& enc);

  void validate() const;
  // One 2x up-sampling stage per factor of two between grid and pixels.
  int stages() const;
  // Channel width after stage i (1-based): input_width / 2^i.
  std::vector<int> stage_widths() const;
};

struct ConvBn {
  Tensor conv_w, conv_b;
  Tensor bn_gamma, bn_beta;
  Tensor bn_running_mean, bn_running_var;
};

struct SegStage {
  Tensor tconv_w, tconv_b;  // 2x2 stride-2 transposed convolution
  Tensor skip_w, skip_b;    // 1x1 tap projection; absent on the last stage
  ConvBn c1, c2;
  bool has_skip = false;
};

struct SegPrediction {
  Tensor probabilities;  // H x W, sigmoid outputs
};

struct SegDecoderWeights {
  SegDecoderConfig cfg;
  std::vector<SegStage> stages;
  Tensor head_w, head_b;  // final 1x1 prediction convolution

  static SegDecoderWeights random_init(const SegDecoderConfig& cfg, std::uint64_t seed);

  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      std::string p = "seg.stage" + std::to_string(i) + ".";
      SegStage& s = stages[i];
      f(p + "tconv.w", s.tconv_w);
      f(p + "tconv.b", s.tconv_b);
      if (s.has_skip) {
        f(p + "skip.w", s.skip_w);
        f(p + "skip.b", s.skip_b);
      }
      for (auto [tag, cb] : {std::pair{"conv1.", &s.c1}, std::pair{"conv2.", &s.c2}}) {
        f(p + tag + "w", cb->conv_w);
        f(p + tag + "b", cb->conv_b);
        f(p + tag + "bn.gamma", cb->bn_gamma);
        f(p + tag + "bn.beta", cb->bn_beta);
        f(p + tag + "bn.running_mean", cb->bn_running_mean);
        f(p + tag + "bn.running_var", cb->bn_running_var);
      }
    }
    f("seg.head.w", head_w);
    f("seg.head.b", head_b);
  }
};

struct ConvBnIds {
  ValueId conv_w, conv_b, bn_gamma, bn_beta, bn_running_mean, bn_running_var;
};

struct SegStageIds {
  ValueId tconv_w, tconv_b, skip_w, skip_b;
  ConvBnIds c1, c2;
};

struct SegIds {
  std::vector<SegStageIds> stages;
  ValueId head_w, head_b;
};

// Running statistics always register as constants; they are state, not
// parameters.
SegIds register_seg_decoder(Tape& tape, SegDecoderWeights& w, bool trainable,
                            ParamRecorder* rec);

// Decoder forward over reshaped taps (block index -> D x h x w map). The
// deepest tap is the bottleneck; each stage doubles resolution, fuses the
// next-shallower tap through a 1x1 projection, and applies two 3x3
// conv+BN+ReLU pairs. Train mode uses batch statistics and updates the
// running averages on `w`; infer mode reads the running averages.
ValueId seg_forward(Tape& tape, const std::map<int, ValueId>& taps, const SegIds& ids,
                    SegDecoderWeights& w, RunMode mode);

SegPrediction seg_forward(const std::map<int, Tensor>& taps, SegDecoderWeights& w, RunMode mode);

// BCE with clamped logs plus smoothed Dice, averaged over all pixels.
ValueId seg_loss(Tape& tape, ValueId probabilities, const Tensor& ground_truth,
                 double dice_eps = 1e-6, double clamp_delta = 1e-7);
double seg_loss(const SegPrediction& pred, const Tensor& ground_truth, double dice_eps = 1e-6,
                double clamp_delta = 1e-7);

Tensor binarize(const Tensor& probabilities, double threshold = 0.5);

}  // namespace oeseg
