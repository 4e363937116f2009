#pragma once

#include <cstdint>
#include <vector>

#include "oeseg/encoder.hpp"
#include "oeseg/patch.hpp"
#include "oeseg/tape.hpp"
#include "oeseg/weights.hpp"

namespace oeseg {

struct MaeConfig {
  int dec_width = 32;
  int dec_blocks = 2;
  int dec_heads = 4;
  int mlp_ratio = 4;
  double ln_eps = 1e-5;
  double target_eps = 1e-6;  // per-patch standardization guard

  // Proportional miniature of the full-scale lightweight decoder.
  static MaeConfig desk() { return MaeConfig{}; }
  static MaeConfig paper() { return MaeConfig{512, 8, 16, 4, 1e-5, 1e-6}; }

  void validate() const;
};

// Reconstruction decoder: projection to decoder width, one shared mask
// token, transformer blocks, a fixed position table, and the pixel head.
struct MaeDecoderWeights {
  MaeConfig cfg;
  Tensor proj_w, proj_b;  // D -> D_dec
  Tensor mask_token;      // D_dec
  std::vector<BlockWeights> blocks;
  Tensor positions;  // N x D_dec, fixed sinusoidal buffer
  Tensor head_w, head_b;  // D_dec -> P*P*C

  static MaeDecoderWeights random_init(const EncoderConfig& enc, const MaeConfig& cfg,
                                       std::uint64_t seed);

  template <typename F>
  void visit(F&& f) {
    f("mae.proj.w", proj_w);
    f("mae.proj.b", proj_b);
    f("mae.mask_token", mask_token);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      std::string p = "mae.block" + std::to_string(i) + ".";
      BlockWeights& b = blocks[i];
      f(p + "ln1.gamma", b.ln1_gamma);
      f(p + "ln1.beta", b.ln1_beta);
      f(p + "attn.wq", b.wq);
      f(p + "attn.bq", b.bq);
      f(p + "attn.wk", b.wk);
      f(p + "attn.bk", b.bk);
      f(p + "attn.wv", b.wv);
      f(p + "attn.bv", b.bv);
      f(p + "attn.wo", b.wo);
      f(p + "attn.bo", b.bo);
      f(p + "ln2.gamma", b.ln2_gamma);
      f(p + "ln2.beta", b.ln2_beta);
      f(p + "mlp.w1", b.mlp_w1);
      f(p + "mlp.b1", b.mlp_b1);
      f(p + "mlp.w2", b.mlp_w2);
      f(p + "mlp.b2", b.mlp_b2);
    }
    f("mae.positions", positions);
    f("mae.head.w", head_w);
    f("mae.head.b", head_b);
  }
};

struct MaeIds {
  ValueId proj_w, proj_b;
  ValueId mask_token;
  std::vector<BlockIds> blocks;
  ValueId positions;
  ValueId head_w, head_b;
};

MaeIds register_mae_decoder(Tape& tape, MaeDecoderWeights& w, bool trainable,
                            ParamRecorder* rec);

// Rebuilds the full token sequence (mask token at every masked index,
// positions added to all tokens), runs the decoder blocks, and predicts
// every patch vector.
ValueId mae_decode(Tape& tape, ValueId visible_encoded, const MaskPlan& plan, const MaeIds& ids,
                   const MaeConfig& cfg);

// Per-patch standardization of reconstruction targets.
Tensor normalize_patch_targets(const PatchSequence& seq, double eps = 1e-6);

// Mean squared error over every scalar of every masked patch row.
ValueId recon_loss(Tape& tape, ValueId pred, const Tensor& target_norm, const MaskPlan& plan);

}  // namespace oeseg
