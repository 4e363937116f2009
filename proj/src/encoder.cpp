#include "oeseg/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "oeseg/error.hpp"

namespace oeseg {

EncoderConfig EncoderConfig::desk() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::vit_large() {
  EncoderConfig cfg;
  cfg.blocks = 24;
  cfg.width = 1024;
  cfg.heads = 16;
  cfg.mlp_ratio = 4;
  cfg.patch = 16;
  cfg.taps = {6, 12, 18, 24};
  cfg.image_side = 224;
  cfg.channels = 3;
  return cfg;
}

void EncoderConfig::validate() const {
  if (blocks < 1 || width < 1 || heads < 1 || mlp_ratio < 1 || patch < 1 || image_side < 1 ||
      channels < 1) {
    throw ConfigError("encoder config: all sizes must be positive");
  }
  if (width % heads != 0) throw ConfigError("encoder config: width not divisible by heads");
  if (image_side % patch != 0) {
    throw ConfigError("encoder config: image side not divisible by patch");
  }
  if (taps.empty()) throw ConfigError("encoder config: taps must be nonempty");
  if (!std::is_sorted(taps.begin(), taps.end())) {
    throw ConfigError("encoder config: taps must be sorted");
  }
  for (int t : taps) {
    if (t < 1 || t > blocks) throw ConfigError("encoder config: tap outside 1..L");
  }
  if (taps.back() != blocks) throw ConfigError("encoder config: taps must include block L");
}

EncoderWeights EncoderWeights::random_init(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x656e63ULL));
  std::size_t d = static_cast<std::size_t>(cfg.width);
  std::size_t hidden = d * static_cast<std::size_t>(cfg.mlp_ratio);

  EncoderWeights w;
  w.cfg = cfg;
  w.embed.projection = trunc_normal_tensor(rng, {cfg.patch_dim(), d});
  w.embed.positions = sinusoidal_positions(cfg.grid(), cfg.grid(), d);
  w.blocks.resize(static_cast<std::size_t>(cfg.blocks));
  for (BlockWeights& b : w.blocks) {
    b.ln1_gamma = Tensor::full({d}, 1.0);
    b.ln1_beta = Tensor::zeros({d});
    b.wq = trunc_normal_tensor(rng, {d, d});
    b.bq = Tensor::zeros({d});
    b.wk = trunc_normal_tensor(rng, {d, d});
    b.bk = Tensor::zeros({d});
    b.wv = trunc_normal_tensor(rng, {d, d});
    b.bv = Tensor::zeros({d});
    b.wo = trunc_normal_tensor(rng, {d, d});
    b.bo = Tensor::zeros({d});
    b.ln2_gamma = Tensor::full({d}, 1.0);
    b.ln2_beta = Tensor::zeros({d});
    b.mlp_w1 = trunc_normal_tensor(rng, {d, hidden});
    b.mlp_b1 = Tensor::zeros({hidden});
    b.mlp_w2 = trunc_normal_tensor(rng, {hidden, d});
    b.mlp_b2 = Tensor::zeros({d});
  }
  return w;
}

BlockIds register_block(Tape& tape, BlockWeights& w, const std::string& prefix, bool trainable,
                        ParamRecorder* rec) {
  ParamRecorder local;
  ParamRecorder& r = rec ? *rec : local;
  BlockIds ids;
  ids.ln1_gamma = r.put(tape, trainable, prefix + "ln1.gamma", w.ln1_gamma);
  ids.ln1_beta = r.put(tape, trainable, prefix + "ln1.beta", w.ln1_beta);
  ids.wq = r.put(tape, trainable, prefix + "attn.wq", w.wq);
  ids.bq = r.put(tape, trainable, prefix + "attn.bq", w.bq);
  ids.wk = r.put(tape, trainable, prefix + "attn.wk", w.wk);
  ids.bk = r.put(tape, trainable, prefix + "attn.bk", w.bk);
  ids.wv = r.put(tape, trainable, prefix + "attn.wv", w.wv);
  ids.bv = r.put(tape, trainable, prefix + "attn.bv", w.bv);
  ids.wo = r.put(tape, trainable, prefix + "attn.wo", w.wo);
  ids.bo = r.put(tape, trainable, prefix + "attn.bo", w.bo);
  ids.ln2_gamma = r.put(tape, trainable, prefix + "ln2.gamma", w.ln2_gamma);
  ids.ln2_beta = r.put(tape, trainable, prefix + "ln2.beta", w.ln2_beta);
  ids.mlp_w1 = r.put(tape, trainable, prefix + "mlp.w1", w.mlp_w1);
  ids.mlp_b1 = r.put(tape, trainable, prefix + "mlp.b1", w.mlp_b1);
  ids.mlp_w2 = r.put(tape, trainable, prefix + "mlp.w2", w.mlp_w2);
  ids.mlp_b2 = r.put(tape, trainable, prefix + "mlp.b2", w.mlp_b2);
  return ids;
}

EncoderIds register_encoder(Tape& tape, EncoderWeights& w, bool trainable, ParamRecorder* rec) {
  ParamRecorder local;
  ParamRecorder& r = rec ? *rec : local;
  EncoderIds ids;
  ids.embed_projection = r.put(tape, trainable, "embed.projection", w.embed.projection);
  ids.embed_positions = tape.constant(w.embed.positions);
  ids.blocks.reserve(w.blocks.size());
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    ids.blocks.push_back(register_block(tape, w.blocks[i], "block" + std::to_string(i) + ".",
                                        trainable, rec ? rec : nullptr));
  }
  return ids;
}

namespace {

ValueId multi_head_attention(Tape& tape, ValueId normed, const BlockIds& w, int heads) {
  std::size_t d = tape.value(normed).dim(1);
  std::size_t head_dim = d / static_cast<std::size_t>(heads);
  double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  ValueId q = tape.add_bias(tape.matmul(normed, w.wq), w.bq);
  ValueId k = tape.add_bias(tape.matmul(normed, w.wk), w.bk);
  ValueId v = tape.add_bias(tape.matmul(normed, w.wv), w.bv);

  ValueId merged = 0;
  for (int h = 0; h < heads; ++h) {
    std::size_t off = static_cast<std::size_t>(h) * head_dim;
    ValueId qh = tape.slice(q, 1, off, head_dim);
    ValueId kh = tape.slice(k, 1, off, head_dim);
    ValueId vh = tape.slice(v, 1, off, head_dim);
    ValueId scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), att_scale);
    ValueId attn = tape.softmax(scores, 1);
    ValueId oh = tape.matmul(attn, vh);
    merged = (h == 0) ? oh : tape.concat(merged, oh, 1);
  }
  return tape.add_bias(tape.matmul(merged, w.wo), w.bo);
}

}  // namespace

ValueId encoder_block(Tape& tape, ValueId z, const BlockIds& w, int heads, double ln_eps) {
  ValueId attn_in = tape.layer_norm(z, w.ln1_gamma, w.ln1_beta, ln_eps);
  ValueId z_mid = tape.add(multi_head_attention(tape, attn_in, w, heads), z);
  ValueId mlp_in = tape.layer_norm(z_mid, w.ln2_gamma, w.ln2_beta, ln_eps);
  ValueId hidden = tape.gelu(tape.add_bias(tape.matmul(mlp_in, w.mlp_w1), w.mlp_b1));
  ValueId mlp_out = tape.add_bias(tape.matmul(hidden, w.mlp_w2), w.mlp_b2);
  return tape.add(mlp_out, z_mid);
}

std::map<int, ValueId> encode(Tape& tape, ValueId tokens, const EncoderIds& ids,
                              const EncoderConfig& cfg) {
  cfg.validate();
  std::map<int, ValueId> taps;
  ValueId z = tokens;
  for (int block = 1; block <= cfg.blocks; ++block) {
    z = encoder_block(tape, z, ids.blocks[static_cast<std::size_t>(block - 1)], cfg.heads,
                      cfg.ln_eps);
    if (std::find(cfg.taps.begin(), cfg.taps.end(), block) != cfg.taps.end()) {
      taps.emplace(block, z);
    }
  }
  return taps;
}

ValueId reshape_features(Tape& tape, ValueId seq, std::size_t grid_h, std::size_t grid_w) {
  const Tensor& t = tape.value(seq);
  if (t.rank() != 2 || t.dim(0) != grid_h * grid_w) {
    throw DimensionError("reshape_features: sequence length must equal grid area");
  }
  std::size_t d = t.dim(1);
  return tape.reshape(tape.transpose(seq), {d, grid_h, grid_w});
}

}  // namespace oeseg
