#include "oeseg/segdec.hpp"

#include <algorithm>
#include <cmath>

#include "oeseg/error.hpp"

namespace oeseg {

SegDecoderConfig SegDecoderConfig::from_encoder(const EncoderConfig& enc) {
  SegDecoderConfig cfg;
  cfg.input_width = enc.width;
  cfg.patch = enc.patch;
  cfg.validate();
  return cfg;
}

void SegDecoderConfig::validate() const {
  if (input_width < 1) throw ConfigError("seg config: input width must be positive");
  int p = patch;
  if (p < 2 || (p & (p - 1)) != 0) {
    throw ConfigError("seg config: patch must be a power of two >= 2");
  }
  if (input_width >> stages() == 0) {
    throw ConfigError("seg config: input width too small for the stage count");
  }
}

int SegDecoderConfig::stages() const {
  int k = 0;
  for (int p = patch; p > 1; p >>= 1) ++k;
  return k;
}

std::vector<int> SegDecoderConfig::stage_widths() const {
  std::vector<int> widths;
  for (int i = 1; i <= stages(); ++i) widths.push_back(input_width >> i);
  return widths;
}

namespace {

ConvBn make_conv_bn(Rng& rng, std::size_t in_ch, std::size_t out_ch, std::size_t k) {
  ConvBn cb;
  cb.conv_w = trunc_normal_tensor(rng, {out_ch, in_ch, k, k});
  cb.conv_b = Tensor::zeros({out_ch});
  cb.bn_gamma = Tensor::full({out_ch}, 1.0);
  cb.bn_beta = Tensor::zeros({out_ch});
  cb.bn_running_mean = Tensor::zeros({out_ch});
  cb.bn_running_var = Tensor::full({out_ch}, 1.0);
  return cb;
}

}  // namespace

SegDecoderWeights SegDecoderWeights::random_init(const SegDecoderConfig& cfg,
                                                 std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x736567ULL));
  SegDecoderWeights w;
  w.cfg = cfg;
  int k = cfg.stages();
  std::vector<int> widths = cfg.stage_widths();
  int prev = cfg.input_width;
  for (int i = 0; i < k; ++i) {
    std::size_t wi = static_cast<std::size_t>(widths[static_cast<std::size_t>(i)]);
    SegStage s;
    s.tconv_w = trunc_normal_tensor(rng, {static_cast<std::size_t>(prev), wi, 2, 2});
    s.tconv_b = Tensor::zeros({wi});
    s.has_skip = i + 1 < k;
    std::size_t conv1_in = wi;
    if (s.has_skip) {
      s.skip_w = trunc_normal_tensor(rng, {wi, static_cast<std::size_t>(cfg.input_width), 1, 1});
      s.skip_b = Tensor::zeros({wi});
      conv1_in = 2 * wi;
    }
    s.c1 = make_conv_bn(rng, conv1_in, wi, 3);
    s.c2 = make_conv_bn(rng, wi, wi, 3);
    w.stages.push_back(std::move(s));
    prev = widths[static_cast<std::size_t>(i)];
  }
  w.head_w = trunc_normal_tensor(rng, {1, static_cast<std::size_t>(widths.back()), 1, 1});
  // Background-prior logit: fresh decoders start near the foreground base
  // rate instead of p=0.5, which keeps early training out of the
  // all-foreground/all-background tug-of-war.
  w.head_b = Tensor::full({1}, -2.0);
  return w;
}

namespace {

ConvBnIds register_conv_bn(Tape& tape, ConvBn& cb, const std::string& prefix, bool trainable,
                           ParamRecorder& r) {
  ConvBnIds ids;
  ids.conv_w = r.put(tape, trainable, prefix + "w", cb.conv_w);
  ids.conv_b = r.put(tape, trainable, prefix + "b", cb.conv_b);
  ids.bn_gamma = r.put(tape, trainable, prefix + "bn.gamma", cb.bn_gamma);
  ids.bn_beta = r.put(tape, trainable, prefix + "bn.beta", cb.bn_beta);
  ids.bn_running_mean = tape.constant(cb.bn_running_mean);
  ids.bn_running_var = tape.constant(cb.bn_running_var);
  return ids;
}

// Fixed channel-identity 2x2 all-ones kernel: a stride-2 transposed
// convolution with it is exact nearest-neighbour up-sampling.
ValueId upsample2x(Tape& tape, ValueId x) {
  std::size_t c = tape.value(x).dim(0);
  Tensor w = Tensor::zeros({c, c, 2, 2});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < 4; ++i) w[((ch * c + ch) * 2 + i / 2) * 2 + i % 2] = 1.0;
  }
  return tape.transposed_conv2d(x, tape.constant(std::move(w)),
                                tape.constant(Tensor::zeros({c})), 2);
}

struct BnHook {
  ValueId node;
  Tensor* running_mean;
  Tensor* running_var;
};

ValueId conv_bn_relu(Tape& tape, ValueId x, const ConvBnIds& ids, const SegDecoderConfig& cfg,
                     RunMode mode, std::vector<BnHook>& hooks, ConvBn& cb) {
  ValueId conv = tape.conv2d(x, ids.conv_w, ids.conv_b, 1, 1);
  ValueId bn;
  if (mode == RunMode::kTrain) {
    bn = tape.batch_norm_train(conv, ids.bn_gamma, ids.bn_beta, cfg.bn_eps);
    hooks.push_back({bn, &cb.bn_running_mean, &cb.bn_running_var});
  } else {
    bn = tape.batch_norm_infer(conv, ids.bn_gamma, ids.bn_beta, ids.bn_running_mean,
                               ids.bn_running_var, cfg.bn_eps);
  }
  return tape.relu(bn);
}

}  // namespace

SegIds register_seg_decoder(Tape& tape, SegDecoderWeights& w, bool trainable,
                            ParamRecorder* rec) {
  ParamRecorder local;
  ParamRecorder& r = rec ? *rec : local;
  SegIds ids;
  for (std::size_t i = 0; i < w.stages.size(); ++i) {
    std::string p = "seg.stage" + std::to_string(i) + ".";
    SegStage& s = w.stages[i];
    SegStageIds si{};
    si.tconv_w = r.put(tape, trainable, p + "tconv.w", s.tconv_w);
    si.tconv_b = r.put(tape, trainable, p + "tconv.b", s.tconv_b);
    if (s.has_skip) {
      si.skip_w = r.put(tape, trainable, p + "skip.w", s.skip_w);
      si.skip_b = r.put(tape, trainable, p + "skip.b", s.skip_b);
    }
    si.c1 = register_conv_bn(tape, s.c1, p + "conv1.", trainable, r);
    si.c2 = register_conv_bn(tape, s.c2, p + "conv2.", trainable, r);
    ids.stages.push_back(si);
  }
  ids.head_w = r.put(tape, trainable, "seg.head.w", w.head_w);
  ids.head_b = r.put(tape, trainable, "seg.head.b", w.head_b);
  return ids;
}

ValueId seg_forward(Tape& tape, const std::map<int, ValueId>& taps, const SegIds& ids,
                    SegDecoderWeights& w, RunMode mode) {
  w.cfg.validate();
  int k = w.cfg.stages();
  if (taps.size() != static_cast<std::size_t>(k)) {
    throw ContractError("seg_forward: need exactly one tap per stage");
  }
  std::vector<ValueId> ordered;  // ascending block index
  for (const auto& [block, id] : taps) ordered.push_back(id);

  std::vector<BnHook> hooks;
  ValueId x = ordered.back();  // bottleneck
  for (int i = 0; i < k; ++i) {
    const SegStageIds& si = ids.stages[static_cast<std::size_t>(i)];
    SegStage& sw = w.stages[static_cast<std::size_t>(i)];
    x = tape.transposed_conv2d(x, si.tconv_w, si.tconv_b, 2);
    if (sw.has_skip) {
      ValueId skip = ordered[static_cast<std::size_t>(k - 2 - i)];
      skip = tape.conv2d(skip, si.skip_w, si.skip_b, 1, 0);
      for (int up = 0; up <= i; ++up) skip = upsample2x(tape, skip);
      x = tape.concat(x, skip, 0);
    }
    x = conv_bn_relu(tape, x, si.c1, w.cfg, mode, hooks, sw.c1);
    x = conv_bn_relu(tape, x, si.c2, w.cfg, mode, hooks, sw.c2);
  }
  x = tape.conv2d(x, ids.head_w, ids.head_b, 1, 0);
  x = tape.sigmoid(x);
  std::size_t h = tape.value(x).dim(1), wd = tape.value(x).dim(2);

  if (mode == RunMode::kTrain) {
    for (const BnHook& hook : hooks) {
      Tensor mean, var;
      tape.batch_norm_stats(hook.node, mean, var);
      double m = w.cfg.bn_momentum;
      for (std::size_t c = 0; c < mean.size(); ++c) {
        (*hook.running_mean)[c] = (1.0 - m) * (*hook.running_mean)[c] + m * mean[c];
        (*hook.running_var)[c] = (1.0 - m) * (*hook.running_var)[c] + m * var[c];
      }
    }
  }
  return tape.reshape(x, {h, wd});
}

SegPrediction seg_forward(const std::map<int, Tensor>& taps, SegDecoderWeights& w, RunMode mode) {
  Tape tape;
  std::map<int, ValueId> tap_ids;
  for (const auto& [block, t] : taps) tap_ids.emplace(block, tape.constant(t));
  SegIds ids = register_seg_decoder(tape, w, false, nullptr);
  ValueId out = seg_forward(tape, tap_ids, ids, w, mode);
  return SegPrediction{tape.value(out)};
}

ValueId seg_loss(Tape& tape, ValueId probabilities, const Tensor& ground_truth, double dice_eps,
                 double clamp_delta) {
  const Tensor& p = tape.value(probabilities);
  if (!p.same_shape(ground_truth)) throw DimensionError("seg_loss: shape mismatch");
  for (double v : ground_truth.data()) {
    if (v != 0.0 && v != 1.0) throw ContractError("seg_loss: ground truth must be binary");
  }
  ValueId g = tape.constant(ground_truth);
  ValueId ones = tape.constant(Tensor::full(ground_truth.shape(), 1.0));
  ValueId pc = tape.clamp(probabilities, clamp_delta, 1.0 - clamp_delta);
  ValueId bce = tape.scale(
      tape.mean(tape.add(tape.mul(g, tape.log(pc)),
                         tape.mul(tape.sub(ones, g), tape.log(tape.sub(ones, pc))))),
      -1.0);
  ValueId eps = tape.constant(Tensor::scalar(dice_eps));
  ValueId num = tape.add(tape.scale(tape.sum(tape.mul(probabilities, g)), 2.0), eps);
  ValueId den = tape.add(tape.add(tape.sum(probabilities), tape.sum(g)), eps);
  ValueId dice = tape.sub(tape.constant(Tensor::scalar(1.0)), tape.div(num, den));
  return tape.add(bce, dice);
}

double seg_loss(const SegPrediction& pred, const Tensor& ground_truth, double dice_eps,
                double clamp_delta) {
  Tape tape;
  ValueId p = tape.constant(pred.probabilities);
  return tape.value(seg_loss(tape, p, ground_truth, dice_eps, clamp_delta))[0];
}

Tensor binarize(const Tensor& probabilities, double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0) {
    throw ContractError("binarize: threshold must lie in (0, 1)");
  }
  std::vector<double> out(probabilities.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = probabilities[i] >= threshold ? 1.0 : 0.0;
  }
  return Tensor(probabilities.shape(), std::move(out));
}

}  // namespace oeseg
