#include <cmath>

#include "doctest.h"
#include "oeseg/error.hpp"
#include "oeseg/mae.hpp"
#include "oracles.hpp"

using namespace oeseg;

namespace {

EncoderConfig mini_encoder() {
  EncoderConfig cfg;
  cfg.blocks = 1;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.patch = 4;
  cfg.taps = {1};
  cfg.image_side = 8;  // 2x2 grid, N=4
  cfg.channels = 1;
  return cfg;
}

MaeConfig mini_mae() {
  MaeConfig cfg;
  cfg.dec_width = 8;
  cfg.dec_blocks = 1;
  cfg.dec_heads = 2;
  cfg.mlp_ratio = 2;
  return cfg;
}

}  // namespace

TEST_CASE("mae_decode output shape across mask sizes") {
  EncoderConfig enc = mini_encoder();
  MaeConfig mc = mini_mae();
  MaeDecoderWeights w = MaeDecoderWeights::random_init(enc, mc, 5);
  Rng rng(401);

  for (double ratio : {0.0, 0.75}) {
    MaskPlan plan = sample_mask(4, ratio, 9);
    Tensor visible = oracle::random_tensor(rng, {plan.visible.size(), 8});
    Tape tape;
    MaeIds ids = register_mae_decoder(tape, w, false, nullptr);
    ValueId pred = mae_decode(tape, tape.constant(visible), plan, ids, mc);
    CHECK(tape.value(pred).shape() == std::vector<std::size_t>{4, 16});
  }

  // M = N-1: a single visible token still yields N rows.
  MaskPlan plan;
  plan.masked = {0, 1, 3};
  plan.visible = {2};
  plan.ratio = 0.75;
  Tensor one = oracle::random_tensor(rng, {1, 8});
  Tape tape;
  MaeIds ids = register_mae_decoder(tape, w, false, nullptr);
  ValueId pred = mae_decode(tape, tape.constant(one), plan, ids, mc);
  CHECK(tape.value(pred).dim(0) == 4);
}

TEST_CASE("masked positions share the token: zero position table symmetry") {
  EncoderConfig enc = mini_encoder();
  MaeConfig mc = mini_mae();
  MaeDecoderWeights w = MaeDecoderWeights::random_init(enc, mc, 6);
  w.positions = Tensor::zeros({4, 8});

  MaskPlan plan;
  plan.masked = {1, 3};
  plan.visible = {0, 2};
  plan.ratio = 0.5;

  Rng rng(402);
  Tensor visible = oracle::random_tensor(rng, {2, 8});
  Tape tape;
  MaeIds ids = register_mae_decoder(tape, w, false, nullptr);
  const Tensor& pred = tape.value(mae_decode(tape, tape.constant(visible), plan, ids, mc));
  for (std::size_t c = 0; c < 16; ++c) {
    CHECK(pred.at2(1, c) == pred.at2(3, c));
  }
}

TEST_CASE("normalize_patch_targets standardizes per patch") {
  {
    PatchSequence seq;
    seq.patches = Tensor::full({3, 4}, 2.7);
    seq.grid_h = 3;
    seq.grid_w = 1;
    seq.patch = 2;
    seq.channels = 1;
    Tensor t = normalize_patch_targets(seq);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);
  }
  {
    PatchSequence seq;
    seq.patches = Tensor({1, 2}, {1.0, 3.0});
    seq.grid_h = 1;
    seq.grid_w = 1;
    seq.patch = 1;
    seq.channels = 2;
    Tensor t = normalize_patch_targets(seq);
    CHECK(std::abs(t[0] + 1.0) < 1e-3);
    CHECK(std::abs(t[1] - 1.0) < 1e-3);
  }
  {
    // Patch variance must be well above the 1e-6 standardization guard for
    // the unit-variance claim to hold at this tolerance.
    Rng rng(403);
    PatchSequence seq;
    seq.patches = oracle::random_tensor(rng, {6, 25}, -2.5, 2.5);
    seq.grid_h = 2;
    seq.grid_w = 3;
    seq.patch = 5;
    seq.channels = 1;
    Tensor t = normalize_patch_targets(seq);
    for (std::size_t r = 0; r < 6; ++r) {
      double mu = 0, var = 0;
      for (std::size_t c = 0; c < 25; ++c) mu += t.at2(r, c);
      mu /= 25.0;
      for (std::size_t c = 0; c < 25; ++c) var += (t.at2(r, c) - mu) * (t.at2(r, c) - mu);
      var /= 25.0;
      CHECK(std::abs(mu) < 1e-10);
      CHECK(std::abs(var - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("recon_loss masked-support semantics") {
  Rng rng(404);
  MaskPlan plan;
  plan.masked = {0, 2};
  plan.visible = {1, 3};
  plan.ratio = 0.5;
  Tensor target = oracle::random_tensor(rng, {4, 6});

  {
    // pred == target on masked rows -> zero loss.
    Tensor pred = oracle::random_tensor(rng, {4, 6});
    for (std::uint32_t r : plan.masked) {
      for (std::size_t c = 0; c < 6; ++c) pred.at2(r, c) = target.at2(r, c);
    }
    Tape tape;
    CHECK(tape.value(recon_loss(tape, tape.constant(pred), target, plan))[0] == 0.0);
  }
  {
    // pred - target == 1 at every masked pixel -> loss 1.
    Tensor pred = target;
    for (std::uint32_t r : plan.masked) {
      for (std::size_t c = 0; c < 6; ++c) pred.at2(r, c) += 1.0;
    }
    Tape tape;
    CHECK(tape.value(recon_loss(tape, tape.constant(pred), target, plan))[0] ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
  {
    // Perturbing visible rows leaves the loss unchanged.
    Tensor pred = oracle::random_tensor(rng, {4, 6});
    Tape t1;
    double l1 = t1.value(recon_loss(t1, t1.constant(pred), target, plan))[0];
    for (std::uint32_t r : plan.visible) {
      for (std::size_t c = 0; c < 6; ++c) pred.at2(r, c) += rng.next_uniform(-5, 5);
    }
    Tape t2;
    double l2 = t2.value(recon_loss(t2, t2.constant(pred), target, plan))[0];
    CHECK(l1 == l2);
  }
  {
    // Empty mask is rejected.
    MaskPlan none = sample_mask(4, 0.0, 1);
    Tape tape;
    ValueId pred = tape.constant(oracle::random_tensor(rng, {4, 6}));
    CHECK_THROWS_AS(recon_loss(tape, pred, target, none), ContractError);
  }
}

TEST_CASE("recon_loss gradient through decoder and encoder passes finite differences") {
  EncoderConfig enc = mini_encoder();
  MaeConfig mc = mini_mae();
  EncoderWeights ew = EncoderWeights::random_init(enc, 21);
  MaeDecoderWeights mw = MaeDecoderWeights::random_init(enc, mc, 22);
  Rng rng(405);
  Tensor image = oracle::random_tensor(rng, {8, 8, 1}, 0.0, 1.0);
  PatchSequence seq = patchify(image, 4);
  MaskPlan plan = sample_mask(4, 0.5, 17);
  Tensor targets = normalize_patch_targets(seq);

  Tape tape;
  ParamRecorder rec;
  EncoderIds eids = register_encoder(tape, ew, true, &rec);
  MaeIds mids = register_mae_decoder(tape, mw, true, &rec);
  ValueId tokens = embed_visible(tape, seq, plan, eids.embed_projection, eids.embed_positions);
  auto taps = encode(tape, tokens, eids, enc);
  ValueId pred = mae_decode(tape, taps.at(enc.blocks), plan, mids, mc);
  ValueId loss = recon_loss(tape, pred, targets, plan);
  auto grads = tape.backward(loss);

  // Finite differences on a sample of coordinates of every parameter.
  Rng pick(406);
  double worst = 0.0;
  for (const ParamRef& p : rec.refs()) {
    const Tensor& grad = grads.at(p.id);
    for (int probe = 0; probe < 2; ++probe) {
      std::size_t c = static_cast<std::size_t>(pick.next_below(p.tensor->size()));
      double keep = (*p.tensor)[c];
      auto eval = [&](double v) {
        (*p.tensor)[c] = v;
        Tape t;
        EncoderIds ei = register_encoder(t, ew, false, nullptr);
        MaeIds mi = register_mae_decoder(t, mw, false, nullptr);
        ValueId tk = embed_visible(t, seq, plan, ei.embed_projection, ei.embed_positions);
        auto tp = encode(t, tk, ei, enc);
        ValueId pr = mae_decode(t, tp.at(enc.blocks), plan, mi, mc);
        return t.value(recon_loss(t, pr, targets, plan))[0];
      };
      double up = eval(keep + 1e-5);
      double down = eval(keep - 1e-5);
      (*p.tensor)[c] = keep;
      double fd = (up - down) / 2e-5;
      double ad = grad[c];
      double err = std::abs(ad - fd);
      if (err > 1e-7) worst = std::max(worst, err / std::max({std::abs(ad), std::abs(fd), 1e-6}));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("one line-searched gradient step decreases the reconstruction loss") {
  EncoderConfig enc = mini_encoder();
  MaeConfig mc = mini_mae();

  int successes = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EncoderWeights ew = EncoderWeights::random_init(enc, mix_seed(500, seed));
    MaeDecoderWeights mw = MaeDecoderWeights::random_init(enc, mc, mix_seed(501, seed));
    Rng rng(mix_seed(502, seed));
    Tensor image = oracle::random_tensor(rng, {8, 8, 1}, 0.0, 1.0);
    PatchSequence seq = patchify(image, 4);
    MaskPlan plan = sample_mask(4, 0.5, seed);
    Tensor targets = normalize_patch_targets(seq);

    auto forward = [&](ParamRecorder* rec, bool trainable) {
      Tape tape;
      EncoderIds ei = register_encoder(tape, ew, trainable, rec);
      MaeIds mi = register_mae_decoder(tape, mw, trainable, rec);
      ValueId tk = embed_visible(tape, seq, plan, ei.embed_projection, ei.embed_positions);
      auto tp = encode(tape, tk, ei, enc);
      ValueId pr = mae_decode(tape, tp.at(enc.blocks), plan, mi, mc);
      ValueId loss = recon_loss(tape, pr, targets, plan);
      return std::pair{tape.value(loss)[0], tape.backward(loss)};
    };

    ParamRecorder rec;
    Tape tape;
    EncoderIds ei = register_encoder(tape, ew, true, &rec);
    MaeIds mi = register_mae_decoder(tape, mw, true, &rec);
    ValueId tk = embed_visible(tape, seq, plan, ei.embed_projection, ei.embed_positions);
    auto tp = encode(tape, tk, ei, enc);
    ValueId loss = recon_loss(tape, mae_decode(tape, tp.at(enc.blocks), plan, mi, mc),
                              targets, plan);
    double before = tape.value(loss)[0];
    auto grads = tape.backward(loss);

    // Backtracking line search on plain gradient descent.
    std::vector<Tensor> snapshot;
    for (const ParamRef& p : rec.refs()) snapshot.push_back(*p.tensor);
    bool decreased = false;
    for (double step = 1e-2; step > 1e-8; step *= 0.5) {
      for (std::size_t i = 0; i < rec.refs().size(); ++i) {
        const ParamRef& p = rec.refs()[i];
        const Tensor& grad = grads.at(p.id);
        for (std::size_t c = 0; c < p.tensor->size(); ++c) {
          (*p.tensor)[c] = snapshot[i][c] - step * grad[c];
        }
      }
      double after = forward(nullptr, false).first;
      if (after < before) {
        decreased = true;
        break;
      }
    }
    if (decreased) ++successes;
    for (std::size_t i = 0; i < rec.refs().size(); ++i) *rec.refs()[i].tensor = snapshot[i];
  }
  CHECK(successes == 20);
}
