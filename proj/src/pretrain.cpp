#include "oeseg/pretrain.hpp"

#include "oeseg/error.hpp"
#include "oeseg/patch.hpp"
#include "oeseg/rng.hpp"
#include "oeseg/train.hpp"

namespace oeseg {

void PretrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw ConfigError("pretrain config: bad epoch/batch count");
  if (learning_rate < 0) throw ConfigError("pretrain config: negative learning rate");
  if (mask_ratio <= 0.0 || mask_ratio >= 1.0) {
    throw ConfigError("pretrain config: mask ratio must lie in (0, 1)");
  }
}

PretrainResult pretrain_reconstruction(const EncoderConfig& enc_cfg, const MaeConfig& mae_cfg,
                                       const Dataset& images, const PretrainConfig& cfg) {
  cfg.validate();
  enc_cfg.validate();
  if (images.empty()) throw ContractError("pretrain: empty dataset");

  PretrainResult result{EncoderWeights::random_init(enc_cfg, mix_seed(cfg.seed, 0xe0cULL)),
                        MaeDecoderWeights::random_init(enc_cfg, mae_cfg,
                                                       mix_seed(cfg.seed, 0xdecULL)),
                        {}};

  TrainConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  AdamState adam;
  int adam_t = 0;

  std::vector<std::size_t> order(images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng epoch_rng(mix_seed(cfg.seed, 0x9a9eULL, static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Tape tape;
      ParamRecorder rec;
      EncoderIds enc_ids = register_encoder(tape, result.encoder, true, &rec);
      MaeIds mae_ids = register_mae_decoder(tape, result.decoder, true, &rec);

      ValueId batch_loss = 0;
      for (std::size_t bi = start; bi < stop; ++bi) {
        std::size_t ii = order[bi];
        PatchSequence seq =
            patchify(images[ii].image, static_cast<std::size_t>(enc_cfg.patch));
        MaskPlan plan = sample_mask(
            seq.count(), cfg.mask_ratio,
            mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(ii)));
        ValueId tokens =
            embed_visible(tape, seq, plan, enc_ids.embed_projection, enc_ids.embed_positions);
        auto taps = encode(tape, tokens, enc_ids, enc_cfg);
        ValueId pred = mae_decode(tape, taps.at(enc_cfg.blocks), plan, mae_ids, mae_cfg);
        ValueId loss = recon_loss(tape, pred, normalize_patch_targets(seq), plan);
        batch_loss = (bi == start) ? loss : tape.add(batch_loss, loss);
      }
      std::size_t count = stop - start;
      if (count > 1) batch_loss = tape.scale(batch_loss, 1.0 / static_cast<double>(count));
      loss_sum += tape.value(batch_loss)[0] * static_cast<double>(count);

      auto grads = tape.backward(batch_loss);
      std::vector<Tensor*> params;
      std::vector<const Tensor*> gptrs;
      for (const ParamRef& p : rec.refs()) {
        params.push_back(p.tensor);
        gptrs.push_back(&grads.at(p.id));
      }
      adam_step(params, gptrs, adam, ++adam_t, adam_cfg);
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(images.size()));
  }
  return result;
}

}  // namespace oeseg
