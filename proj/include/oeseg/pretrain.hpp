#pragma once

#include <cstdint>
#include <vector>

#include "oeseg/dataset.hpp"
#include "oeseg/encoder.hpp"
#include "oeseg/mae.hpp"

namespace oeseg {

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 4;
  double learning_rate = 1e-3;
  double mask_ratio = 0.75;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainResult {
  EncoderWeights encoder;
  MaeDecoderWeights decoder;
  std::vector<double> epoch_losses;  // mean masked-reconstruction loss per epoch
};

// Toy-scale masked-reconstruction training: random masking per (epoch,
// image), Adam over encoder and decoder jointly.
PretrainResult pretrain_reconstruction(const EncoderConfig& enc_cfg, const MaeConfig& mae_cfg,
                                       const Dataset& images, const PretrainConfig& cfg);

}  // namespace oeseg
