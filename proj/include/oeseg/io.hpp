#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oeseg/coreset.hpp"
#include "oeseg/dataset.hpp"
#include "oeseg/encoder.hpp"
#include "oeseg/mae.hpp"
#include "oeseg/segdec.hpp"
#include "oeseg/train.hpp"

namespace oeseg {

inline constexpr std::uint16_t kWeightFormatVersion = 1;
inline constexpr std::uint16_t kFeatureFormatVersion = 1;
inline constexpr int kManifestFormatVersion = 1;
inline constexpr int kHistoryFormatVersion = 1;

// ---------------------------------------------------------------------
// Weight container ("OEWT"): named f32 tensors, little-endian, with a
// name/rank/dims/offset table up front. Offsets are relative to the start
// of the payload section.
// ---------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void save_weight_container(const std::string& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_weight_container(const std::string& path);

// Model adapters. Configs travel as reserved "meta.*" entries so a
// container is self-describing; absent model sections are skipped.
struct ModelBundle {
  std::optional<EncoderWeights> encoder;
  std::optional<MaeDecoderWeights> mae;
  std::optional<SegDecoderWeights> seg;
};

void save_models(const std::string& path, ModelBundle& bundle);
ModelBundle load_models(const std::string& path);

// FNV-1a over the raw bytes of a file; used for provenance fingerprints.
std::string file_fingerprint(const std::string& path);

// ---------------------------------------------------------------------
// Feature cache ("OEFC").
// ---------------------------------------------------------------------

void save_feature_cache(const std::string& path, const std::vector<FeatureVector>& features);
std::vector<FeatureVector> load_feature_cache(const std::string& path);

// ---------------------------------------------------------------------
// Images: 8-bit grayscale PNG or PGM, chosen by file extension.
// ---------------------------------------------------------------------

void write_image(const std::string& path, const Tensor& values);  // HxW in [0,1]
Tensor read_image(const std::string& path);                       // HxWx1 in [0,1]

// ---------------------------------------------------------------------
// Dataset directory layout: root/<case_id>/scan_<idx>.<ext> plus
// mask_<idx>.<ext>; masks binarized at 0.5 on load.
// ---------------------------------------------------------------------

void save_dataset(const std::string& root, const Dataset& records,
                  const std::string& image_format = "png");
Dataset load_dataset(const std::string& root);

// ---------------------------------------------------------------------
// JSON artifacts.
// ---------------------------------------------------------------------

void save_manifest(const std::string& path, const SelectionManifest& manifest,
                   const std::string& stamp_json = "");
SelectionManifest load_manifest(const std::string& path);

void save_history(const std::string& path, const TrainHistory& history,
                  const std::string& stamp_json = "");
TrainHistory load_history(const std::string& path);

// ---------------------------------------------------------------------
// Sweep results: CSV (authoritative) and an SVG line plot (courtesy).
// ---------------------------------------------------------------------

struct SweepRow {
  std::string budget;  // as given, e.g. "10%" or "12"
  Strategy strategy = Strategy::kCoreset;
  std::uint64_t seed = 0;
  double mean_dsc = 0.0;
  double std_dsc = 0.0;
  double train_seconds = 0.0;
};

void save_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);
std::vector<SweepRow> load_sweep_csv(const std::string& path);
void save_sweep_svg(const std::string& path, const std::vector<SweepRow>& rows);

// Aligned text table of per-(budget, strategy) means for the report
// subcommand.
std::string render_sweep_table(const std::vector<SweepRow>& rows);

// ---------------------------------------------------------------------
// Reproducibility stamp: config hash, seeds, and format versions. JSON
// outputs embed it; binary/CSV outputs get a "<path>.stamp.json" sidecar.
// ---------------------------------------------------------------------

std::string make_stamp(const std::string& config_dump, const std::vector<std::uint64_t>& seeds);
void write_stamp_sidecar(const std::string& artifact_path, const std::string& stamp_json);

std::string fnv1a_hex(const void* data, std::size_t n);

}  // namespace oeseg
