#include "oeseg/mae.hpp"

#include <cmath>

#include "oeseg/error.hpp"

namespace oeseg {

void MaeConfig::validate() const {
  if (dec_width < 1 || dec_blocks < 1 || dec_heads < 1 || mlp_ratio < 1) {
    throw ConfigError("mae config: all sizes must be positive");
  }
  if (dec_width % dec_heads != 0) {
    throw ConfigError("mae config: decoder width not divisible by heads");
  }
}

MaeDecoderWeights MaeDecoderWeights::random_init(const EncoderConfig& enc, const MaeConfig& cfg,
                                                 std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x6d6165ULL));
  std::size_t d = static_cast<std::size_t>(enc.width);
  std::size_t dd = static_cast<std::size_t>(cfg.dec_width);
  std::size_t hidden = dd * static_cast<std::size_t>(cfg.mlp_ratio);

  MaeDecoderWeights w;
  w.cfg = cfg;
  w.proj_w = trunc_normal_tensor(rng, {d, dd});
  w.proj_b = Tensor::zeros({dd});
  w.mask_token = trunc_normal_tensor(rng, {dd});
  w.blocks.resize(static_cast<std::size_t>(cfg.dec_blocks));
  for (BlockWeights& b : w.blocks) {
    b.ln1_gamma = Tensor::full({dd}, 1.0);
    b.ln1_beta = Tensor::zeros({dd});
    b.wq = trunc_normal_tensor(rng, {dd, dd});
    b.bq = Tensor::zeros({dd});
    b.wk = trunc_normal_tensor(rng, {dd, dd});
    b.bk = Tensor::zeros({dd});
    b.wv = trunc_normal_tensor(rng, {dd, dd});
    b.bv = Tensor::zeros({dd});
    b.wo = trunc_normal_tensor(rng, {dd, dd});
    b.bo = Tensor::zeros({dd});
    b.ln2_gamma = Tensor::full({dd}, 1.0);
    b.ln2_beta = Tensor::zeros({dd});
    b.mlp_w1 = trunc_normal_tensor(rng, {dd, hidden});
    b.mlp_b1 = Tensor::zeros({hidden});
    b.mlp_w2 = trunc_normal_tensor(rng, {hidden, dd});
    b.mlp_b2 = Tensor::zeros({dd});
  }
  w.positions = sinusoidal_positions(enc.grid(), enc.grid(), dd);
  w.head_w = trunc_normal_tensor(rng, {dd, enc.patch_dim()});
  w.head_b = Tensor::zeros({enc.patch_dim()});
  return w;
}

MaeIds register_mae_decoder(Tape& tape, MaeDecoderWeights& w, bool trainable,
                            ParamRecorder* rec) {
  ParamRecorder local;
  ParamRecorder& r = rec ? *rec : local;
  MaeIds ids;
  ids.proj_w = r.put(tape, trainable, "mae.proj.w", w.proj_w);
  ids.proj_b = r.put(tape, trainable, "mae.proj.b", w.proj_b);
  ids.mask_token = r.put(tape, trainable, "mae.mask_token", w.mask_token);
  ids.blocks.reserve(w.blocks.size());
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    ids.blocks.push_back(register_block(tape, w.blocks[i],
                                        "mae.block" + std::to_string(i) + ".", trainable, rec));
  }
  ids.positions = tape.constant(w.positions);
  ids.head_w = r.put(tape, trainable, "mae.head.w", w.head_w);
  ids.head_b = r.put(tape, trainable, "mae.head.b", w.head_b);
  return ids;
}

ValueId mae_decode(Tape& tape, ValueId visible_encoded, const MaskPlan& plan, const MaeIds& ids,
                   const MaeConfig& cfg) {
  cfg.validate();
  std::size_t n = plan.total();
  const Tensor& vis = tape.value(visible_encoded);
  if (vis.rank() != 2 || vis.dim(0) != plan.visible.size()) {
    throw ContractError("mae_decode: encoded rows disagree with the mask plan");
  }
  if (tape.value(ids.positions).dim(0) != n) {
    throw ContractError("mae_decode: position table size disagrees with the plan");
  }

  ValueId projected = tape.add_bias(tape.matmul(visible_encoded, ids.proj_w), ids.proj_b);
  ValueId tokens = tape.scatter_rows(projected, plan.visible, n);
  if (!plan.masked.empty()) {
    ValueId mask_rows = tape.repeat_row(ids.mask_token, plan.masked.size());
    tokens = tape.add(tokens, tape.scatter_rows(mask_rows, plan.masked, n));
  }
  tokens = tape.add(tokens, ids.positions);
  for (const BlockIds& b : ids.blocks) {
    tokens = encoder_block(tape, tokens, b, cfg.dec_heads, cfg.ln_eps);
  }
  return tape.add_bias(tape.matmul(tokens, ids.head_w), ids.head_b);
}

Tensor normalize_patch_targets(const PatchSequence& seq, double eps) {
  const Tensor& p = seq.patches;
  std::size_t n = p.dim(0), d = p.dim(1);
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = p.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (row[c] - mu) * inv;
  }
  return Tensor({n, d}, std::move(out));
}

ValueId recon_loss(Tape& tape, ValueId pred, const Tensor& target_norm, const MaskPlan& plan) {
  if (plan.masked.empty()) {
    throw ContractError("recon_loss: undefined for an empty mask");
  }
  const Tensor& p = tape.value(pred);
  if (!p.same_shape(target_norm)) {
    throw DimensionError("recon_loss: prediction and target shapes disagree");
  }
  // Gather the masked target rows into a constant.
  std::size_t d = target_norm.dim(1);
  std::vector<double> rows(plan.masked.size() * d);
  for (std::size_t r = 0; r < plan.masked.size(); ++r) {
    const double* src = target_norm.data().data() + plan.masked[r] * d;
    std::copy(src, src + d, rows.data() + r * d);
  }
  ValueId target = tape.constant(Tensor({plan.masked.size(), d}, std::move(rows)));
  ValueId diff = tape.sub(tape.gather_rows(pred, plan.masked), target);
  return tape.mean(tape.mul(diff, diff));
}

}  // namespace oeseg
