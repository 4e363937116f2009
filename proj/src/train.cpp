#include "oeseg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "oeseg/error.hpp"
#include "oeseg/patch.hpp"
#include "oeseg/rng.hpp"

namespace oeseg {

std::string to_string(FreezePolicy p) {
  return p == FreezePolicy::kDecoderOnly ? "decoder-only" : "all";
}

FreezePolicy parse_freeze_policy(const std::string& s) {
  if (s == "decoder-only") return FreezePolicy::kDecoderOnly;
  if (s == "all") return FreezePolicy::kAll;
  throw ConfigError("unknown freeze policy '" + s + "'");
}

void TrainConfig::validate() const {
  if (learning_rate < 0) throw ConfigError("train config: negative learning rate");
  if (batch_size < 1) throw ConfigError("train config: batch size must be >= 1");
  if (lr_patience < 1 || early_stop_patience < 1) {
    throw ConfigError("train config: patiences must be positive");
  }
  if (lr_decay_factor <= 0 || lr_decay_factor > 1) {
    throw ConfigError("train config: decay factor must lie in (0, 1]");
  }
  if (validation_fraction < 0 || validation_fraction >= 1) {
    throw ConfigError("train config: validation fraction must lie in [0, 1)");
  }
  if (flip_probability < 0 || flip_probability > 1) {
    throw ConfigError("train config: flip probability must lie in [0, 1]");
  }
  if (max_epochs < 1) throw ConfigError("train config: max epochs must be positive");
}

bool TrainHistory::same_trace(const TrainHistory& other) const {
  if (epochs.size() != other.epochs.size() || stop_reason != other.stop_reason ||
      best_epoch != other.best_epoch) {
    return false;
  }
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    if (epochs[i].train_loss != other.epochs[i].train_loss ||
        epochs[i].val_loss != other.epochs[i].val_loss ||
        epochs[i].learning_rate != other.epochs[i].learning_rate) {
      return false;
    }
  }
  return true;
}

void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state, int t, const TrainConfig& cfg) {
  if (t < 1) throw ContractError("adam_step: step index must be >= 1");
  if (params.size() != grads.size()) throw ContractError("adam_step: list sizes disagree");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.push_back(Tensor::zeros(p->shape()));
      state.v.push_back(Tensor::zeros(p->shape()));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: stale optimizer state");

  double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
  double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (!p.same_shape(g) || !p.same_shape(state.m[i])) {
      throw ContractError("adam_step: shape mismatch");
    }
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t c = 0; c < p.size(); ++c) {
      m[c] = cfg.adam_beta1 * m[c] + (1.0 - cfg.adam_beta1) * g[c];
      v[c] = cfg.adam_beta2 * v[c] + (1.0 - cfg.adam_beta2) * g[c] * g[c];
      double mhat = m[c] / bc1;
      double vhat = v[c] / bc2;
      p[c] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

double lr_schedule(const std::vector<double>& val_losses, const TrainConfig& cfg) {
  double lr = cfg.learning_rate;
  double best = std::numeric_limits<double>::infinity();
  int stagnant = 0;
  for (double loss : val_losses) {
    if (loss < best) {
      best = loss;
      stagnant = 0;
    } else if (++stagnant == cfg.lr_patience) {
      lr *= cfg.lr_decay_factor;
      stagnant = 0;
    }
  }
  return lr;
}

bool early_stop(const std::vector<double>& val_losses, const TrainConfig& cfg) {
  if (val_losses.empty()) return false;
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_losses.size(); ++i) {
    if (val_losses[i] < val_losses[best]) best = i;
  }
  return val_losses.size() - 1 - best >= static_cast<std::size_t>(cfg.early_stop_patience);
}

Tensor mirror_horizontal(const Tensor& t) {
  if (t.rank() == 2) {
    std::size_t h = t.dim(0), w = t.dim(1);
    std::vector<double> out(t.size());
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out[y * w + x] = t[y * w + (w - 1 - x)];
    }
    return Tensor(t.shape(), std::move(out));
  }
  if (t.rank() == 3) {
    std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
    std::vector<double> out(t.size());
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          out[(y * w + x) * c + ch] = t[(y * w + (w - 1 - x)) * c + ch];
        }
      }
    }
    return Tensor(t.shape(), std::move(out));
  }
  throw DimensionError("mirror_horizontal: rank must be 2 or 3");
}

std::pair<Tensor, Tensor> augment_flip(const Tensor& image, const Tensor& mask,
                                       std::uint64_t seed, double flip_probability) {
  if (image.dim(0) != mask.dim(0) || image.dim(1) != mask.dim(1)) {
    throw DimensionError("augment_flip: image and mask sizes disagree");
  }
  Rng rng(mix_seed(seed, 0xf11bULL));
  if (rng.next_double() < flip_probability) {
    return {mirror_horizontal(image), mirror_horizontal(mask)};
  }
  return {image, mask};
}

std::map<int, Tensor> encoder_taps(EncoderWeights& enc, const Tensor& image) {
  const EncoderConfig& cfg = enc.cfg;
  Tensor input = image;
  if (input.dim(2) != static_cast<std::size_t>(cfg.channels) && input.dim(2) == 1) {
    input = replicate_channels(input, static_cast<std::size_t>(cfg.channels));
  }
  PatchSequence seq = patchify(input, static_cast<std::size_t>(cfg.patch));
  if (seq.count() != cfg.tokens()) {
    throw DimensionError("encoder_taps: image size incompatible with the encoder grid");
  }
  MaskPlan none = sample_mask(seq.count(), 0.0, 0);
  Tape tape;
  EncoderIds ids = register_encoder(tape, enc, false, nullptr);
  ValueId tokens = embed_visible(tape, seq, none, ids.embed_projection, ids.embed_positions);
  auto taps = encode(tape, tokens, ids, cfg);
  std::map<int, Tensor> out;
  for (const auto& [block, id] : taps) {
    out.emplace(block, tape.value(reshape_features(tape, id, cfg.grid(), cfg.grid())));
  }
  return out;
}

SegPrediction segment_scan(EncoderWeights& enc, SegDecoderWeights& dec, const Tensor& image) {
  auto taps = encoder_taps(enc, image);
  return seg_forward(taps, dec, RunMode::kInfer);
}

namespace {

struct AnnotatedScan {
  Tensor image;
  Tensor mask;
  std::map<int, Tensor> taps_plain;    // frozen-encoder caches
  std::map<int, Tensor> taps_flipped;
};

double validation_loss(EncoderWeights& enc, SegDecoderWeights& dec,
                       const std::vector<AnnotatedScan>& scans,
                       const std::vector<std::size_t>& val_idx, bool frozen) {
  double total = 0.0;
  for (std::size_t i : val_idx) {
    SegPrediction pred = frozen
                             ? seg_forward(scans[i].taps_plain, dec, RunMode::kInfer)
                             : segment_scan(enc, dec, scans[i].image);
    total += seg_loss(pred, scans[i].mask);
  }
  return total / static_cast<double>(val_idx.size());
}

}  // namespace

FinetuneResult finetune(const EncoderWeights& enc_in, const SegDecoderWeights& dec_in,
                        const SelectionManifest& manifest, const Dataset& dataset,
                        const TrainConfig& cfg) {
  cfg.validate();
  const bool frozen = cfg.freeze_policy == FreezePolicy::kDecoderOnly;

  EncoderWeights enc = enc_in;
  SegDecoderWeights dec = dec_in;

  // Resolve the manifest against the dataset.
  std::vector<AnnotatedScan> scans;
  for (const auto& [case_id, scan_index] : manifest.selected) {
    const BScanRecord* found = nullptr;
    for (const BScanRecord& r : dataset) {
      if (r.case_id == case_id && r.scan_index == scan_index) {
        found = &r;
        break;
      }
    }
    if (!found) {
      throw DataError("finetune: manifest scan " + case_id + "/" +
                      std::to_string(scan_index) + " not in the dataset");
    }
    if (!found->has_mask()) {
      throw DataError("finetune: scan " + case_id + "/" + std::to_string(scan_index) +
                      " has no ground-truth mask");
    }
    scans.push_back({found->image, found->mask, {}, {}});
  }
  if (scans.size() < 2) {
    throw ConfigError("finetune: need at least two annotated scans for a train/val split");
  }

  // Seeded train/validation split with at least one validation sample.
  std::vector<std::size_t> order(scans.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(mix_seed(cfg.seed, 0x5b117eULL));
  split_rng.shuffle(order);
  std::size_t n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::llround(cfg.validation_fraction * static_cast<double>(scans.size()))));
  n_val = std::min(n_val, scans.size() - 1);
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<long>(n_val));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<long>(n_val), order.end());

  if (frozen) {
    for (AnnotatedScan& s : scans) {
      s.taps_plain = encoder_taps(enc, s.image);
      s.taps_flipped = encoder_taps(enc, mirror_horizontal(s.image));
    }
  }

  TrainHistory history;
  std::vector<double> val_losses;
  AdamState adam;
  int adam_t = 0;
  double best_val = std::numeric_limits<double>::infinity();
  EncoderWeights best_enc = enc;
  SegDecoderWeights best_dec = dec;
  TrainConfig step_cfg = cfg;  // learning rate mutates across epochs

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    step_cfg.learning_rate = lr_schedule(val_losses, cfg);

    std::vector<std::size_t> epoch_order = train_idx;
    Rng epoch_rng(mix_seed(cfg.seed, 0xe90cULL, static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(epoch_order);

    double train_loss_sum = 0.0;
    for (std::size_t start = 0; start < epoch_order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t stop = std::min(epoch_order.size(),
                                  start + static_cast<std::size_t>(cfg.batch_size));
      Tape tape;
      ParamRecorder rec;
      EncoderIds enc_ids{};
      if (!frozen) enc_ids = register_encoder(tape, enc, true, &rec);
      SegIds seg_ids = register_seg_decoder(tape, dec, true, &rec);

      ValueId batch_loss = 0;
      for (std::size_t bi = start; bi < stop; ++bi) {
        std::size_t si = epoch_order[bi];
        std::uint64_t draw = mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch),
                                      static_cast<std::uint64_t>(si));
        bool flip = Rng(mix_seed(draw, 0xf11bULL)).next_double() < cfg.flip_probability;

        std::map<int, ValueId> tap_ids;
        Tensor mask = flip ? mirror_horizontal(scans[si].mask) : scans[si].mask;
        if (frozen) {
          const auto& taps = flip ? scans[si].taps_flipped : scans[si].taps_plain;
          for (const auto& [block, t] : taps) tap_ids.emplace(block, tape.constant(t));
        } else {
          Tensor image = flip ? mirror_horizontal(scans[si].image) : scans[si].image;
          PatchSequence seq = patchify(image, static_cast<std::size_t>(enc.cfg.patch));
          MaskPlan none = sample_mask(seq.count(), 0.0, 0);
          ValueId tokens =
              embed_visible(tape, seq, none, enc_ids.embed_projection, enc_ids.embed_positions);
          auto taps = encode(tape, tokens, enc_ids, enc.cfg);
          for (const auto& [block, id] : taps) {
            tap_ids.emplace(block,
                            reshape_features(tape, id, enc.cfg.grid(), enc.cfg.grid()));
          }
        }
        ValueId probs = seg_forward(tape, tap_ids, seg_ids, dec, RunMode::kTrain);
        ValueId loss = seg_loss(tape, probs, mask);
        batch_loss = (bi == start) ? loss : tape.add(batch_loss, loss);
      }
      std::size_t count = stop - start;
      if (count > 1) batch_loss = tape.scale(batch_loss, 1.0 / static_cast<double>(count));
      train_loss_sum += tape.value(batch_loss)[0] * static_cast<double>(count);

      auto grads = tape.backward(batch_loss);
      std::vector<Tensor*> params;
      std::vector<const Tensor*> gptrs;
      for (const ParamRef& p : rec.refs()) {
        params.push_back(p.tensor);
        gptrs.push_back(&grads.at(p.id));
      }
      adam_step(params, gptrs, adam, ++adam_t, step_cfg);
    }

    double train_loss = train_loss_sum / static_cast<double>(train_idx.size());
    double val_loss = validation_loss(enc, dec, scans, val_idx, frozen);
    val_losses.push_back(val_loss);

    double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back({train_loss, val_loss, step_cfg.learning_rate, seconds});

    if (val_loss < best_val) {
      best_val = val_loss;
      best_enc = enc;
      best_dec = dec;
      history.best_epoch = epoch;
    }
    if (early_stop(val_losses, cfg)) {
      history.stop_reason = "early_stop";
      break;
    }
  }
  if (history.stop_reason.empty()) history.stop_reason = "max_epochs";

  return {std::move(best_enc), std::move(best_dec), std::move(history)};
}

double dsc(const Tensor& pred_mask, const Tensor& gt_mask) {
  if (!pred_mask.same_shape(gt_mask)) throw DimensionError("dsc: shape mismatch");
  double inter = 0.0, p = 0.0, g = 0.0;
  for (std::size_t i = 0; i < pred_mask.size(); ++i) {
    double a = pred_mask[i], b = gt_mask[i];
    if ((a != 0.0 && a != 1.0) || (b != 0.0 && b != 1.0)) {
      throw ContractError("dsc: masks must be binary");
    }
    inter += a * b;
    p += a;
    g += b;
  }
  if (p + g == 0.0) return 1.0;
  return 2.0 * inter / (p + g);
}

EvalResult evaluate(EncoderWeights& enc, SegDecoderWeights& dec, const Dataset& test_scans,
                    double threshold) {
  if (test_scans.empty()) throw ContractError("evaluate: empty test set");
  EvalResult result;
  std::map<std::string, std::pair<double, int>> by_case;
  for (const BScanRecord& r : test_scans) {
    if (!r.has_mask()) {
      throw ContractError("evaluate: scan " + r.case_id + "/" +
                          std::to_string(r.scan_index) + " has no mask");
    }
    SegPrediction pred = segment_scan(enc, dec, r.image);
    double score = dsc(binarize(pred.probabilities, threshold), r.mask);
    result.per_scan.push_back(score);
    auto& agg = by_case[r.case_id];
    agg.first += score;
    agg.second += 1;
  }
  double mean = 0.0;
  for (double s : result.per_scan) mean += s;
  mean /= static_cast<double>(result.per_scan.size());
  double var = 0.0;
  for (double s : result.per_scan) var += (s - mean) * (s - mean);
  var /= static_cast<double>(result.per_scan.size());
  result.mean = mean;
  result.stddev = std::sqrt(var);
  for (const auto& [case_id, agg] : by_case) {
    result.per_case.emplace_back(case_id, agg.first / agg.second);
  }
  return result;
}

}  // namespace oeseg
