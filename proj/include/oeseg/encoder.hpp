#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "oeseg/patch.hpp"
#include "oeseg/tape.hpp"
#include "oeseg/weights.hpp"

namespace oeseg {

struct EncoderConfig {
  int blocks = 4;
  int width = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int patch = 16;
  std::vector<int> taps = {1, 2, 3, 4};  // 1-based block indices, must include the last
  int image_side = 64;
  int channels = 1;
  double ln_eps = 1e-5;

  // CPU-trainable miniature keeping the full multi-scale topology.
  static EncoderConfig desk();
  // The full-scale preset (not trainable at desk scale; shapes only).
  static EncoderConfig vit_large();

  void validate() const;
  std::size_t grid() const { return static_cast<std::size_t>(image_side / patch); }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const {
    return static_cast<std::size_t>(patch) * static_cast<std::size_t>(patch) *
           static_cast<std::size_t>(channels);
  }
};

// One pre-norm transformer block: MSA and MLP sub-blocks, LN before each,
// residual connections after each.
struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct BlockIds {
  ValueId ln1_gamma, ln1_beta;
  ValueId wq, bq, wk, bk, wv, bv, wo, bo;
  ValueId ln2_gamma, ln2_beta;
  ValueId mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct EncoderWeights {
  EncoderConfig cfg;
  EmbedWeights embed;
  std::vector<BlockWeights> blocks;

  static EncoderWeights random_init(const EncoderConfig& cfg, std::uint64_t seed);

  // Canonical (name, tensor) enumeration; the order is the serialization
  // and optimizer-state order.
  template <typename F>
  void visit(F&& f);
};

struct EncoderIds {
  ValueId embed_projection;
  ValueId embed_positions;
  std::vector<BlockIds> blocks;
};

BlockIds register_block(Tape& tape, BlockWeights& w, const std::string& prefix, bool trainable,
                        ParamRecorder* rec);

// Positions are registered as constants: the table is fixed (sinusoidal or
// a loaded learned table), never trained here.
EncoderIds register_encoder(Tape& tape, EncoderWeights& w, bool trainable, ParamRecorder* rec);

ValueId encoder_block(Tape& tape, ValueId z, const BlockIds& w, int heads, double ln_eps);

// Runs blocks 1..L and exports the configured taps (keyed by 1-based block
// index); the final block is always among them.
std::map<int, ValueId> encode(Tape& tape, ValueId tokens, const EncoderIds& ids,
                              const EncoderConfig& cfg);

// (h*w) x D token sequence -> D x h x w channel-first feature map.
ValueId reshape_features(Tape& tape, ValueId seq, std::size_t grid_h, std::size_t grid_w);

template <typename F>
void EncoderWeights::visit(F&& f) {
  f("embed.projection", embed.projection);
  f("embed.positions", embed.positions);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    std::string p = "block" + std::to_string(i) + ".";
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
}

}  // namespace oeseg
