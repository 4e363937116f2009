#include <cmath>

#include "doctest.h"
#include "oeseg/error.hpp"
#include "oeseg/segdec.hpp"
#include "oracles.hpp"

using namespace oeseg;

namespace {

std::map<int, Tensor> random_taps(Rng& rng, const SegDecoderConfig& cfg, std::size_t grid) {
  std::map<int, Tensor> taps;
  for (int i = 1; i <= cfg.stages(); ++i) {
    taps.emplace(i, oracle::random_tensor(
                        rng, {static_cast<std::size_t>(cfg.input_width), grid, grid}));
  }
  return taps;
}

}  // namespace

TEST_CASE("desk preset decoder arithmetic: 4 stages, widths halve 32..4") {
  SegDecoderConfig cfg = SegDecoderConfig::from_encoder(EncoderConfig::desk());
  CHECK(cfg.stages() == 4);
  CHECK(cfg.stage_widths() == std::vector<int>{32, 16, 8, 4});
}

TEST_CASE("seg_forward output matches the configured image size") {
  struct Shape {
    int width, patch;
    std::size_t grid;
  };
  for (Shape s : {Shape{64, 16, 4}, Shape{32, 8, 4}, Shape{16, 4, 8}}) {
    SegDecoderConfig cfg;
    cfg.input_width = s.width;
    cfg.patch = s.patch;
    SegDecoderWeights w = SegDecoderWeights::random_init(cfg, 5);
    Rng rng(601);
    auto taps = random_taps(rng, cfg, s.grid);
    SegPrediction pred = seg_forward(taps, w, RunMode::kInfer);
    std::size_t side = s.grid * static_cast<std::size_t>(s.patch);
    CHECK(pred.probabilities.shape() == std::vector<std::size_t>{side, side});
    for (std::size_t i = 0; i < pred.probabilities.size(); ++i) {
      CHECK(pred.probabilities[i] > 0.0);
      CHECK(pred.probabilities[i] < 1.0);
    }
  }
}

TEST_CASE("all-zero weights yield sigmoid(0)=0.5 everywhere") {
  SegDecoderConfig cfg;
  cfg.input_width = 16;
  cfg.patch = 4;
  SegDecoderWeights w = SegDecoderWeights::random_init(cfg, 1);
  for (SegStage& s : w.stages) {
    for (Tensor* t : {&s.tconv_w, &s.tconv_b, &s.skip_w, &s.skip_b, &s.c1.conv_w, &s.c1.conv_b,
                      &s.c1.bn_beta, &s.c2.conv_w, &s.c2.conv_b, &s.c2.bn_beta}) {
      if (!t->empty()) *t = Tensor::zeros(t->shape());
    }
  }
  w.head_w = Tensor::zeros(w.head_w.shape());
  w.head_b = Tensor::zeros(w.head_b.shape());

  Rng rng(602);
  auto taps = random_taps(rng, cfg, 8);
  SegPrediction pred = seg_forward(taps, w, RunMode::kTrain);
  for (std::size_t i = 0; i < pred.probabilities.size(); ++i) {
    CHECK(pred.probabilities[i] == 0.5);
  }
}

TEST_CASE("seg_forward infer mode is deterministic and pure") {
  SegDecoderConfig cfg;
  cfg.input_width = 16;
  cfg.patch = 4;
  SegDecoderWeights w = SegDecoderWeights::random_init(cfg, 9);
  Rng rng(603);
  auto taps = random_taps(rng, cfg, 4);
  SegPrediction a = seg_forward(taps, w, RunMode::kInfer);
  SegPrediction b = seg_forward(taps, w, RunMode::kInfer);
  CHECK(a.probabilities.bit_equal(b.probabilities));
}

TEST_CASE("train mode updates batch-norm running statistics") {
  SegDecoderConfig cfg;
  cfg.input_width = 16;
  cfg.patch = 4;
  SegDecoderWeights w = SegDecoderWeights::random_init(cfg, 13);
  Rng rng(604);
  auto taps = random_taps(rng, cfg, 4);

  CHECK(w.stages[0].c1.bn_running_mean[0] == 0.0);
  CHECK(w.stages[0].c1.bn_running_var[0] == 1.0);
  seg_forward(taps, w, RunMode::kTrain);
  bool changed = false;
  for (std::size_t c = 0; c < w.stages[0].c1.bn_running_mean.size(); ++c) {
    if (w.stages[0].c1.bn_running_mean[c] != 0.0) changed = true;
  }
  CHECK(changed);

  // Infer mode leaves them untouched.
  Tensor snapshot = w.stages[0].c1.bn_running_mean;
  seg_forward(taps, w, RunMode::kInfer);
  CHECK(w.stages[0].c1.bn_running_mean.bit_equal(snapshot));
}

TEST_CASE("seg_forward rejects a missing tap") {
  SegDecoderConfig cfg;
  cfg.input_width = 16;
  cfg.patch = 4;
  SegDecoderWeights w = SegDecoderWeights::random_init(cfg, 3);
  Rng rng(605);
  auto taps = random_taps(rng, cfg, 4);
  taps.erase(1);
  CHECK_THROWS_AS(seg_forward(taps, w, RunMode::kInfer), ContractError);
}

TEST_CASE("seg_loss closed forms") {
  {
    // p == g exactly on a nonempty mask.
    Tensor g({2, 2}, {1, 0, 1, 0});
    SegPrediction pred{g};
    CHECK(seg_loss(pred, g) < 1e-5);
  }
  {
    // p = 0.5 everywhere, g half ones: BCE = ln 2, Dice term = 0.5.
    Tensor p = Tensor::full({4, 4}, 0.5);
    std::vector<double> gv(16, 0.0);
    for (int i = 0; i < 8; ++i) gv[static_cast<std::size_t>(i)] = 1.0;
    Tensor g({4, 4}, gv);
    double loss = seg_loss(SegPrediction{p}, g);
    CHECK(loss == doctest::Approx(std::log(2.0) + 0.5).epsilon(1e-6));
  }
  {
    Tensor p = Tensor::full({2, 2}, 0.5);
    Tensor g({2, 3}, {1, 0, 1, 0, 1, 0});
    Tape tape;
    CHECK_THROWS_AS(seg_loss(tape, tape.constant(p), g), DimensionError);
    Tensor bad({2, 2}, {0.5, 0, 1, 0});
    CHECK_THROWS_AS(seg_loss(tape, tape.constant(p), bad), ContractError);
  }
}

TEST_CASE("seg_loss matches an independent scalar-loop oracle") {
  Rng rng(606);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t h = 3 + rng.next_below(6), wd = 3 + rng.next_below(6);
    Tensor p = oracle::random_tensor(rng, {h, wd}, 0.01, 0.99);
    Tensor g = Tensor::zeros({h, wd});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.next_double() < 0.4 ? 1.0 : 0.0;

    const double delta = 1e-7, eps = 1e-6;
    double bce = 0.0, spg = 0.0, sp = 0.0, sg = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      double pc = std::min(std::max(p[i], delta), 1.0 - delta);
      bce -= g[i] * std::log(pc) + (1.0 - g[i]) * std::log(1.0 - pc);
      spg += p[i] * g[i];
      sp += p[i];
      sg += g[i];
    }
    bce /= static_cast<double>(p.size());
    double expect = bce + 1.0 - (2.0 * spg + eps) / (sp + sg + eps);
    CHECK(std::abs(seg_loss(SegPrediction{p}, g) - expect) < 1e-10);
  }
}

TEST_CASE("dice term vanishes exactly at p == g regardless of mask size") {
  for (std::size_t ones : {1u, 5u, 36u}) {
    Tensor g = Tensor::zeros({6, 6});
    for (std::size_t i = 0; i < ones; ++i) g[i] = 1.0;
    // With p == g the BCE reduces to -log(1-delta) terms; subtract it to
    // isolate the Dice term.
    double loss = seg_loss(SegPrediction{g}, g);
    double bce = -std::log(1.0 - 1e-7);
    CHECK(std::abs(loss - bce) < 1e-15);
  }
}

TEST_CASE("seg_loss gradient with respect to pre-sigmoid activations") {
  Rng rng(607);
  Tensor logits = oracle::random_tensor(rng, {4, 5}, -2.0, 2.0);
  Tensor g = Tensor::zeros({4, 5});
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.next_double() < 0.5 ? 1.0 : 0.0;

  auto report = oracle::finite_difference_check(
      {logits},
      [&](Tape& t, const std::vector<ValueId>& p) {
        return seg_loss(t, t.sigmoid(p[0]), g);
      });
  CHECK(report.worst_rel < 1e-4);
}

TEST_CASE("seg_loss gradient through the whole decoder") {
  SegDecoderConfig cfg;
  cfg.input_width = 8;
  cfg.patch = 4;  // 2 stages
  SegDecoderWeights w = SegDecoderWeights::random_init(cfg, 31);
  Rng rng(608);
  std::map<int, Tensor> taps;
  taps.emplace(1, oracle::random_tensor(rng, {8, 3, 3}));
  taps.emplace(2, oracle::random_tensor(rng, {8, 3, 3}));
  Tensor g = Tensor::zeros({12, 12});
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.next_double() < 0.3 ? 1.0 : 0.0;

  Tape tape;
  ParamRecorder rec;
  SegIds ids = register_seg_decoder(tape, w, true, &rec);
  std::map<int, ValueId> tap_ids;
  for (auto& [k, t] : taps) tap_ids.emplace(k, tape.constant(t));
  SegDecoderWeights scratch = w;  // running stats updated on the copy
  ValueId probs = seg_forward(tape, tap_ids, ids, scratch, RunMode::kTrain);
  ValueId loss = seg_loss(tape, probs, g);
  auto grads = tape.backward(loss);

  // Step 1e-6: at 1e-5 the difference interval can straddle ReLU kinks of
  // the deep BN+ReLU path and the reference itself goes bad.
  const double h = 1e-6;
  Rng pick(609);
  double worst = 0.0;
  for (const ParamRef& p : rec.refs()) {
    const Tensor& grad = grads.at(p.id);
    for (int probe = 0; probe < 2; ++probe) {
      std::size_t c = static_cast<std::size_t>(pick.next_below(p.tensor->size()));
      double keep = (*p.tensor)[c];
      auto eval = [&](double v) {
        (*p.tensor)[c] = v;
        SegDecoderWeights w2 = w;
        Tape t;
        SegIds ids2 = register_seg_decoder(t, w, true, nullptr);
        std::map<int, ValueId> tap_ids2;
        for (auto& [k2, t2] : taps) tap_ids2.emplace(k2, t.constant(t2));
        ValueId pr = seg_forward(t, tap_ids2, ids2, w2, RunMode::kTrain);
        return t.value(seg_loss(t, pr, g))[0];
      };
      double up = eval(keep + h);
      double down = eval(keep - h);
      (*p.tensor)[c] = keep;
      double fd = (up - down) / (2.0 * h);
      double ad = grad[c];
      double err = std::abs(ad - fd);
      if (err > 1e-7) worst = std::max(worst, err / std::max({std::abs(ad), std::abs(fd), 1e-6}));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("binarize threshold boundary and idempotence") {
  Tensor half = Tensor::full({3, 3}, 0.5);
  Tensor ones = binarize(half, 0.5);
  for (std::size_t i = 0; i < ones.size(); ++i) CHECK(ones[i] == 1.0);

  Tensor low = Tensor::full({3, 3}, 0.49);
  Tensor zeros = binarize(low, 0.5);
  for (std::size_t i = 0; i < zeros.size(); ++i) CHECK(zeros[i] == 0.0);

  Rng rng(610);
  Tensor p = oracle::random_tensor(rng, {5, 5}, 0.0, 1.0);
  Tensor once = binarize(p, 0.5);
  CHECK(binarize(once, 0.5).bit_equal(once));

  CHECK_THROWS_AS(binarize(p, 0.0), ContractError);
}
