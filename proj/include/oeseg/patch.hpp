#pragma once

#include <cstdint>
#include <vector>

#include "oeseg/tape.hpp"
#include "oeseg/tensor.hpp"

namespace oeseg {

// A patchified image: one flattened patch per row, in row-major grid order
// (top-left patch first).
struct PatchSequence {
  Tensor patches;  // N x (P*P*C)
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t patch = 0, channels = 0;

  std::size_t count() const { return grid_h * grid_w; }
};

// Partition of patch indices into masked and visible, both sorted.
struct MaskPlan {
  std::vector<std::uint32_t> masked;
  std::vector<std::uint32_t> visible;
  double ratio = 0.0;
  std::uint64_t seed = 0;

  std::size_t total() const { return masked.size() + visible.size(); }
};

struct EmbedWeights {
  Tensor projection;  // (P*P*C) x D
  Tensor positions;   // N x D, fixed sinusoidal unless a learned table is loaded
};

PatchSequence patchify(const Tensor& image, std::size_t patch_side);
Tensor unpatchify(const PatchSequence& seq);

MaskPlan sample_mask(std::size_t n_patches, double ratio, std::uint64_t seed);

// z0 rows for visible patches only: patches[v]*E + E_pos[v], original order.
ValueId embed_visible(Tape& tape, const PatchSequence& seq, const MaskPlan& plan,
                      ValueId projection, ValueId positions);
Tensor embed_visible(const PatchSequence& seq, const MaskPlan& plan, const EmbedWeights& w);

// Fixed 2-D sine/cosine position table; D must be divisible by 4.
Tensor sinusoidal_positions(std::size_t grid_h, std::size_t grid_w, std::size_t dim);

// Grayscale-to-RGB style channel replication for presets expecting C>1.
Tensor replicate_channels(const Tensor& image, std::size_t channels);

}  // namespace oeseg
