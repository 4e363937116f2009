#include "oeseg/patch.hpp"

#include <algorithm>
#include <cmath>

#include "oeseg/error.hpp"
#include "oeseg/rng.hpp"

namespace oeseg {

PatchSequence patchify(const Tensor& image, std::size_t patch_side) {
  if (image.rank() != 3) throw DimensionError("patchify: image must be HxWxC");
  std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (patch_side == 0 || h % patch_side != 0 || w % patch_side != 0) {
    throw DimensionError("patchify: patch side must divide image dimensions");
  }
  std::size_t gh = h / patch_side, gw = w / patch_side;
  std::size_t pd = patch_side * patch_side * c;
  std::vector<double> out(gh * gw * pd);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      double* dst = out.data() + (py * gw + px) * pd;
      for (std::size_t i = 0; i < patch_side; ++i) {
        for (std::size_t j = 0; j < patch_side; ++j) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            *dst++ = image[((py * patch_side + i) * w + px * patch_side + j) * c + ch];
          }
        }
      }
    }
  }
  PatchSequence seq;
  seq.patches = Tensor({gh * gw, pd}, std::move(out));
  seq.grid_h = gh;
  seq.grid_w = gw;
  seq.patch = patch_side;
  seq.channels = c;
  return seq;
}

Tensor unpatchify(const PatchSequence& seq) {
  std::size_t p = seq.patch, c = seq.channels;
  std::size_t pd = p * p * c;
  if (seq.patches.rank() != 2 || seq.patches.dim(0) != seq.count() ||
      seq.patches.dim(1) != pd) {
    throw DimensionError("unpatchify: sequence inconsistent with its grid");
  }
  std::size_t h = seq.grid_h * p, w = seq.grid_w * p;
  std::vector<double> out(h * w * c);
  for (std::size_t py = 0; py < seq.grid_h; ++py) {
    for (std::size_t px = 0; px < seq.grid_w; ++px) {
      const double* src = seq.patches.data().data() + (py * seq.grid_w + px) * pd;
      for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < p; ++j) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            out[((py * p + i) * w + px * p + j) * c + ch] = *src++;
          }
        }
      }
    }
  }
  return Tensor({h, w, c}, std::move(out));
}

MaskPlan sample_mask(std::size_t n_patches, double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio >= 1.0) {
    throw ContractError("sample_mask: masking ratio must lie in [0, 1)");
  }
  std::size_t m = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(n_patches)));
  Rng rng(mix_seed(seed, 0x6d61736bULL));
  MaskPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  plan.masked = rng.sample_without_replacement(static_cast<std::uint32_t>(n_patches),
                                               static_cast<std::uint32_t>(m));
  std::sort(plan.masked.begin(), plan.masked.end());
  plan.visible.reserve(n_patches - m);
  std::size_t mi = 0;
  for (std::uint32_t i = 0; i < n_patches; ++i) {
    if (mi < plan.masked.size() && plan.masked[mi] == i) {
      ++mi;
    } else {
      plan.visible.push_back(i);
    }
  }
  return plan;
}

ValueId embed_visible(Tape& tape, const PatchSequence& seq, const MaskPlan& plan,
                      ValueId projection, ValueId positions) {
  if (plan.total() != seq.count()) {
    throw ContractError("embed_visible: mask plan and patch sequence disagree on N");
  }
  if (plan.visible.empty()) throw ContractError("embed_visible: no visible patches");
  ValueId gathered = tape.gather_rows(tape.constant(seq.patches), plan.visible);
  ValueId projected = tape.matmul(gathered, projection);
  ValueId pos = tape.gather_rows(positions, plan.visible);
  return tape.add(projected, pos);
}

Tensor embed_visible(const PatchSequence& seq, const MaskPlan& plan, const EmbedWeights& w) {
  Tape tape;
  ValueId out = embed_visible(tape, seq, plan, tape.constant(w.projection),
                              tape.constant(w.positions));
  return tape.value(out);
}

Tensor sinusoidal_positions(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) {
    throw ContractError("sinusoidal_positions: dimension must be divisible by 4");
  }
  std::size_t quarter = dim / 4;
  std::vector<double> out(grid_h * grid_w * dim);
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t c = 0; c < grid_w; ++c) {
      double* row = out.data() + (r * grid_w + c) * dim;
      for (std::size_t i = 0; i < quarter; ++i) {
        double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
        row[i] = std::sin(static_cast<double>(r) * omega);
        row[quarter + i] = std::cos(static_cast<double>(r) * omega);
        row[2 * quarter + i] = std::sin(static_cast<double>(c) * omega);
        row[3 * quarter + i] = std::cos(static_cast<double>(c) * omega);
      }
    }
  }
  return Tensor({grid_h * grid_w, dim}, std::move(out));
}

Tensor replicate_channels(const Tensor& image, std::size_t channels) {
  if (image.rank() != 3) throw DimensionError("replicate_channels: image must be HxWxC");
  if (image.dim(2) != 1) throw ContractError("replicate_channels: input must be single-channel");
  std::size_t h = image.dim(0), w = image.dim(1);
  std::vector<double> out(h * w * channels);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t ch = 0; ch < channels; ++ch) out[i * channels + ch] = image[i];
  }
  return Tensor({h, w, channels}, std::move(out));
}

}  // namespace oeseg
