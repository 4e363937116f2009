#include <algorithm>

#include "doctest.h"
#include "oeseg/encoder.hpp"
#include "oeseg/error.hpp"
#include "oracles.hpp"

using namespace oeseg;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.blocks = 2;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.patch = 4;
  cfg.taps = {1, 2};
  cfg.image_side = 8;
  cfg.channels = 1;
  return cfg;
}

BlockWeights zero_block(std::size_t d, std::size_t hidden) {
  BlockWeights b;
  b.ln1_gamma = Tensor::full({d}, 1.0);
  b.ln1_beta = Tensor::zeros({d});
  b.wq = Tensor::zeros({d, d});
  b.bq = Tensor::zeros({d});
  b.wk = Tensor::zeros({d, d});
  b.bk = Tensor::zeros({d});
  b.wv = Tensor::zeros({d, d});
  b.bv = Tensor::zeros({d});
  b.wo = Tensor::zeros({d, d});
  b.bo = Tensor::zeros({d});
  b.ln2_gamma = Tensor::full({d}, 1.0);
  b.ln2_beta = Tensor::zeros({d});
  b.mlp_w1 = Tensor::zeros({d, hidden});
  b.mlp_b1 = Tensor::zeros({hidden});
  b.mlp_w2 = Tensor::zeros({hidden, d});
  b.mlp_b2 = Tensor::zeros({d});
  return b;
}

}  // namespace

TEST_CASE("encoder_block with zero weights is the identity") {
  Rng rng(301);
  for (std::size_t t : {1, 2, 5}) {
    BlockWeights b = zero_block(8, 16);
    Tape tape;
    BlockIds ids = register_block(tape, b, "b.", false, nullptr);
    Tensor z = oracle::random_tensor(rng, {t, 8});
    ValueId out = encoder_block(tape, tape.constant(z), ids, 2, 1e-5);
    CHECK(tape.value(out).bit_equal(z));
  }
}

TEST_CASE("encoder_block preserves shape") {
  Rng rng(302);
  EncoderConfig cfg = tiny_config();
  EncoderWeights w = EncoderWeights::random_init(cfg, 1);
  for (std::size_t t : {1, 3, 7}) {
    Tape tape;
    EncoderIds ids = register_encoder(tape, w, false, nullptr);
    Tensor z = oracle::random_tensor(rng, {t, 8});
    ValueId out = encoder_block(tape, tape.constant(z), ids.blocks[0], cfg.heads, cfg.ln_eps);
    CHECK(tape.value(out).shape() == z.shape());
  }
}

TEST_CASE("single-head attention matches an explicit oracle") {
  // T=2, D=4, one head: out = softmax(QK^T/sqrt(4)) V with bias-free
  // projections, then the residual/MLP path with zero MLP weights.
  Rng rng(303);
  std::size_t d = 4;
  BlockWeights b = zero_block(d, 8);
  b.wq = oracle::random_tensor(rng, {d, d});
  b.wk = oracle::random_tensor(rng, {d, d});
  b.wv = oracle::random_tensor(rng, {d, d});
  b.wo = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) b.wo.at2(i, i) = 1.0;  // identity output proj

  Tensor z = oracle::random_tensor(rng, {2, d});

  Tape tape;
  BlockIds ids = register_block(tape, b, "b.", false, nullptr);
  ValueId out = encoder_block(tape, tape.constant(z), ids, 1, 1e-5);

  // Oracle: explicit layer norm, QK^T/sqrt(d) softmax, V, plus residual.
  auto ln_row = [&](const double* row, double* dst) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) dst[c] = (row[c] - mu) / std::sqrt(var + 1e-5);
  };
  std::vector<double> n(2 * d);
  ln_row(z.data().data(), n.data());
  ln_row(z.data().data() + d, n.data() + d);
  Tensor normed({2, d}, n);
  Tensor q = oracle::matmul(normed, b.wq);
  Tensor k = oracle::matmul(normed, b.wk);
  Tensor v = oracle::matmul(normed, b.wv);
  std::vector<double> expect(2 * d);
  for (std::size_t i = 0; i < 2; ++i) {
    double s0 = 0, s1 = 0;
    for (std::size_t c = 0; c < d; ++c) {
      s0 += q.at2(i, c) * k.at2(0, c);
      s1 += q.at2(i, c) * k.at2(1, c);
    }
    s0 /= 2.0;  // sqrt(d)=2
    s1 /= 2.0;
    double mx = std::max(s0, s1);
    double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
    double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    for (std::size_t c = 0; c < d; ++c) {
      expect[i * d + c] = z.at2(i, c) + a0 * v.at2(0, c) + a1 * v.at2(1, c);
    }
  }
  // MLP path is zero, so the block output equals the post-attention sum.
  const Tensor& got = tape.value(out);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(std::abs(got[i] - expect[i]) < 1e-10);
  }
}

TEST_CASE("encode exports the configured taps") {
  Rng rng(304);
  EncoderConfig cfg = tiny_config();
  cfg.blocks = 4;
  cfg.taps = {4};
  EncoderWeights w = EncoderWeights::random_init(cfg, 3);
  Tensor tokens = oracle::random_tensor(rng, {4, 8});

  Tape tape;
  EncoderIds ids = register_encoder(tape, w, false, nullptr);
  auto taps = encode(tape, tape.constant(tokens), ids, cfg);
  CHECK(taps.size() == 1);
  CHECK(taps.count(4) == 1);

  // All-tap export: the last export equals the sequential fold.
  cfg.taps = {1, 2, 3, 4};
  w.cfg = cfg;
  Tape tape2;
  EncoderIds ids2 = register_encoder(tape2, w, false, nullptr);
  auto all_taps = encode(tape2, tape2.constant(tokens), ids2, cfg);
  CHECK(all_taps.size() == 4);

  Tape tape3;
  EncoderIds ids3 = register_encoder(tape3, w, false, nullptr);
  ValueId z = tape3.constant(tokens);
  for (int i = 0; i < 4; ++i) {
    z = encoder_block(tape3, z, ids3.blocks[static_cast<std::size_t>(i)], cfg.heads, cfg.ln_eps);
  }
  CHECK(tape2.value(all_taps.at(4)).bit_equal(tape3.value(z)));
}

TEST_CASE("desk preset encode output is finite and non-constant") {
  EncoderConfig cfg = EncoderConfig::desk();
  EncoderWeights w = EncoderWeights::random_init(cfg, 7);
  Rng rng(305);
  Tensor tokens = oracle::random_tensor(rng, {cfg.tokens(), static_cast<std::size_t>(cfg.width)});
  Tape tape;
  EncoderIds ids = register_encoder(tape, w, false, nullptr);
  auto taps = encode(tape, tape.constant(tokens), ids, cfg);
  const Tensor& out = tape.value(taps.at(cfg.blocks));
  double mn = out[0], mx = out[0];
  for (std::size_t i = 0; i < out.size(); ++i) {
    mn = std::min(mn, out[i]);
    mx = std::max(mx, out[i]);
  }
  CHECK(mx > mn);  // finiteness is enforced by Tensor construction
}

TEST_CASE("reshape_features layout law and round-trip") {
  // 4 tokens on a 2x2 grid: token t lands at spatial cell (t/2, t%2).
  Rng rng(306);
  Tensor seq = oracle::random_tensor(rng, {4, 3});
  Tape tape;
  ValueId id = reshape_features(tape, tape.constant(seq), 2, 2);
  const Tensor& maps = tape.value(id);
  CHECK(maps.shape() == std::vector<std::size_t>{3, 2, 2});
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(maps.at3(c, t / 2, t % 2) == seq.at2(t, c));
    }
  }

  // Exact inverse flattening exists.
  ValueId back = tape.transpose(tape.reshape(id, {3, 4}));
  CHECK(tape.value(back).bit_equal(seq));

  CHECK_THROWS_AS(reshape_features(tape, tape.constant(seq), 3, 2), DimensionError);

  // Paper-scale shape law.
  Tensor big = Tensor::zeros({196, 1024});
  Tape tape2;
  ValueId big_id = reshape_features(tape2, tape2.constant(big), 14, 14);
  CHECK(tape2.value(big_id).shape() == std::vector<std::size_t>{1024, 14, 14});
}

TEST_CASE("encoder is permutation-equivariant without positions") {
  Rng rng(307);
  EncoderConfig cfg = tiny_config();
  EncoderWeights w = EncoderWeights::random_init(cfg, 11);
  std::size_t t = 5;
  Tensor tokens = oracle::random_tensor(rng, {t, 8});

  std::vector<std::uint32_t> perm = {3, 0, 4, 1, 2};
  std::vector<double> permuted(t * 8);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t c = 0; c < 8; ++c) permuted[r * 8 + c] = tokens.at2(perm[r], c);
  }
  Tensor tokens_p({t, 8}, permuted);

  Tape ta, tb;
  EncoderIds ia = register_encoder(ta, w, false, nullptr);
  EncoderIds ib = register_encoder(tb, w, false, nullptr);
  const Tensor& ya = ta.value(encode(ta, ta.constant(tokens), ia, cfg).at(cfg.blocks));
  const Tensor& yb = tb.value(encode(tb, tb.constant(tokens_p), ib, cfg).at(cfg.blocks));
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(std::abs(yb.at2(r, c) - ya.at2(perm[r], c)) < 1e-12);
    }
  }
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg = tiny_config();
  cfg.taps = {1};  // missing L
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.taps = {0, 2};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(EncoderConfig::desk().validate());
  CHECK_NOTHROW(EncoderConfig::vit_large().validate());
}
