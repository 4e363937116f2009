#include <algorithm>
#include <fstream>

#include "io_util.hpp"
#include "oeseg/io.hpp"

namespace oeseg {

namespace detail {

std::string read_file_bytes(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(what + ": cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError(what + ": read failure on " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::string& bytes,
                      const std::string& what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(what + ": cannot create " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(what + ": write failure on " + path);
}

}  // namespace detail

using detail::ByteReader;

std::string fnv1a_hex(const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = hex[h & 0xf];
    h >>= 4;
  }
  return out;
}

std::string file_fingerprint(const std::string& path) {
  std::string bytes = detail::read_file_bytes(path, "fingerprint");
  return "fnv1a:" + fnv1a_hex(bytes.data(), bytes.size());
}

void save_weight_container(const std::string& path, const std::vector<NamedTensor>& entries) {
  std::string table;
  std::string payload;
  std::uint64_t offset = 0;
  for (const NamedTensor& e : entries) {
    if (e.name.empty() || e.name.size() > 0xffff) {
      throw FormatError("weight container: bad tensor name");
    }
    detail::put_u16(table, static_cast<std::uint16_t>(e.name.size()));
    table += e.name;
    detail::put_u8(table, static_cast<std::uint8_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) {
      detail::put_u32(table, static_cast<std::uint32_t>(d));
    }
    detail::put_u64(table, offset);
    for (double v : e.tensor.data()) detail::put_f32(payload, static_cast<float>(v));
    offset += 4 * e.tensor.size();
  }

  std::string bytes = "OEWT";
  detail::put_u16(bytes, kWeightFormatVersion);
  detail::put_u32(bytes, static_cast<std::uint32_t>(entries.size()));
  bytes += table;
  bytes += payload;
  detail::write_file_bytes(path, bytes, "weight container");
}

std::vector<NamedTensor> load_weight_container(const std::string& path) {
  std::string bytes = detail::read_file_bytes(path, "weight container");
  ByteReader r(bytes, "weight container");
  if (r.bytes(4) != "OEWT") throw FormatError("weight container: bad magic in " + path);
  if (r.u16() != kWeightFormatVersion) {
    throw FormatError("weight container: unsupported version in " + path);
  }
  std::uint32_t count = r.u32();

  struct RawEntry {
    std::string name;
    std::vector<std::size_t> dims;
    std::uint64_t offset;
    std::uint64_t numel;
  };
  std::vector<RawEntry> raw;
  raw.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    RawEntry e;
    std::uint16_t len = r.u16();
    e.name = r.bytes(len);
    std::uint8_t rank = r.u8();
    e.numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      std::uint32_t dim = r.u32();
      if (dim == 0) throw FormatError("weight container: zero dimension");
      e.dims.push_back(dim);
      e.numel *= dim;
    }
    e.offset = r.u64();
    raw.push_back(std::move(e));
  }

  std::size_t payload_size = r.remaining();
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const RawEntry& e : raw) {
    std::uint64_t end = e.offset + 4 * e.numel;
    if (end > payload_size) throw FormatError("weight container: offset out of bounds");
    spans.emplace_back(e.offset, end);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) {
      throw FormatError("weight container: overlapping payloads");
    }
  }
  std::vector<std::string> names;
  for (const RawEntry& e : raw) names.push_back(e.name);
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end()) {
    throw FormatError("weight container: duplicate tensor name");
  }

  std::size_t payload_start = r.offset();
  std::vector<NamedTensor> out;
  out.reserve(raw.size());
  for (const RawEntry& e : raw) {
    ByteReader pr(bytes, "weight container");
    pr.bytes(payload_start + e.offset);  // seek
    std::vector<double> data(e.numel);
    for (std::uint64_t i = 0; i < e.numel; ++i) data[i] = static_cast<double>(pr.f32());
    out.push_back({e.name, Tensor(e.dims, std::move(data))});
  }
  return out;
}

namespace {

Tensor meta_tensor(const std::vector<double>& values) {
  return Tensor({values.size()}, values);
}

const Tensor* find_entry(const std::vector<NamedTensor>& entries, const std::string& name) {
  for (const NamedTensor& e : entries) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

template <typename W>
void fill_from_entries(W& weights, const std::vector<NamedTensor>& entries,
                       const std::string& prefix) {
  weights.visit([&](const std::string& name, Tensor& t) {
    const Tensor* src = find_entry(entries, prefix + name);
    if (!src) throw FormatError("weight container: missing tensor " + prefix + name);
    if (src->shape() != t.shape()) {
      throw FormatError("weight container: shape mismatch for " + prefix + name);
    }
    t = *src;
  });
}

}  // namespace

void save_models(const std::string& path, ModelBundle& bundle) {
  std::vector<NamedTensor> entries;
  if (bundle.encoder) {
    EncoderConfig& c = bundle.encoder->cfg;
    entries.push_back({"meta.encoder",
                       meta_tensor({static_cast<double>(c.blocks), static_cast<double>(c.width),
                                    static_cast<double>(c.heads),
                                    static_cast<double>(c.mlp_ratio),
                                    static_cast<double>(c.patch),
                                    static_cast<double>(c.image_side),
                                    static_cast<double>(c.channels)})});
    std::vector<double> taps;
    for (int t : c.taps) taps.push_back(static_cast<double>(t));
    entries.push_back({"meta.encoder_taps", meta_tensor(taps)});
    bundle.encoder->visit(
        [&](const std::string& name, Tensor& t) { entries.push_back({name, t}); });
  }
  if (bundle.mae) {
    MaeConfig& c = bundle.mae->cfg;
    entries.push_back({"meta.mae", meta_tensor({static_cast<double>(c.dec_width),
                                                static_cast<double>(c.dec_blocks),
                                                static_cast<double>(c.dec_heads),
                                                static_cast<double>(c.mlp_ratio)})});
    bundle.mae->visit([&](const std::string& name, Tensor& t) { entries.push_back({name, t}); });
  }
  if (bundle.seg) {
    SegDecoderConfig& c = bundle.seg->cfg;
    entries.push_back({"meta.seg", meta_tensor({static_cast<double>(c.input_width),
                                                static_cast<double>(c.patch)})});
    bundle.seg->visit([&](const std::string& name, Tensor& t) { entries.push_back({name, t}); });
  }
  save_weight_container(path, entries);
}

ModelBundle load_models(const std::string& path) {
  std::vector<NamedTensor> entries = load_weight_container(path);
  ModelBundle bundle;

  if (const Tensor* meta = find_entry(entries, "meta.encoder")) {
    if (meta->size() != 7) throw FormatError("weight container: bad encoder metadata");
    EncoderConfig cfg;
    cfg.blocks = static_cast<int>((*meta)[0]);
    cfg.width = static_cast<int>((*meta)[1]);
    cfg.heads = static_cast<int>((*meta)[2]);
    cfg.mlp_ratio = static_cast<int>((*meta)[3]);
    cfg.patch = static_cast<int>((*meta)[4]);
    cfg.image_side = static_cast<int>((*meta)[5]);
    cfg.channels = static_cast<int>((*meta)[6]);
    const Tensor* taps = find_entry(entries, "meta.encoder_taps");
    if (!taps) throw FormatError("weight container: missing encoder taps metadata");
    cfg.taps.clear();
    for (double t : taps->data()) cfg.taps.push_back(static_cast<int>(t));
    cfg.validate();
    EncoderWeights w = EncoderWeights::random_init(cfg, 0);
    fill_from_entries(w, entries, "");
    bundle.encoder = std::move(w);
  }

  if (const Tensor* meta = find_entry(entries, "meta.mae")) {
    if (!bundle.encoder) throw FormatError("weight container: mae weights without encoder");
    if (meta->size() != 4) throw FormatError("weight container: bad mae metadata");
    MaeConfig cfg;
    cfg.dec_width = static_cast<int>((*meta)[0]);
    cfg.dec_blocks = static_cast<int>((*meta)[1]);
    cfg.dec_heads = static_cast<int>((*meta)[2]);
    cfg.mlp_ratio = static_cast<int>((*meta)[3]);
    cfg.validate();
    MaeDecoderWeights w = MaeDecoderWeights::random_init(bundle.encoder->cfg, cfg, 0);
    fill_from_entries(w, entries, "");
    bundle.mae = std::move(w);
  }

  if (const Tensor* meta = find_entry(entries, "meta.seg")) {
    if (meta->size() != 2) throw FormatError("weight container: bad seg metadata");
    SegDecoderConfig cfg;
    cfg.input_width = static_cast<int>((*meta)[0]);
    cfg.patch = static_cast<int>((*meta)[1]);
    cfg.validate();
    SegDecoderWeights w = SegDecoderWeights::random_init(cfg, 0);
    fill_from_entries(w, entries, "");
    bundle.seg = std::move(w);
  }
  return bundle;
}

void save_feature_cache(const std::string& path, const std::vector<FeatureVector>& features) {
  if (features.empty()) throw ContractError("feature cache: nothing to save");
  std::size_t k = features.front().values.size();
  Pooling pooling = features.front().pooling;

  std::string bytes = "OEFC";
  detail::put_u16(bytes, kFeatureFormatVersion);
  detail::put_u8(bytes, pooling == Pooling::kMeanPool ? 0 : 1);
  detail::put_u32(bytes, static_cast<std::uint32_t>(k));
  detail::put_u32(bytes, static_cast<std::uint32_t>(features.size()));
  for (const FeatureVector& f : features) {
    if (f.values.size() != k || f.pooling != pooling) {
      throw ContractError("feature cache: inconsistent records");
    }
    detail::put_u16(bytes, static_cast<std::uint16_t>(f.case_id.size()));
    bytes += f.case_id;
    detail::put_u32(bytes, static_cast<std::uint32_t>(f.scan_index));
    for (double v : f.values.data()) detail::put_f32(bytes, static_cast<float>(v));
  }
  detail::write_file_bytes(path, bytes, "feature cache");
}

std::vector<FeatureVector> load_feature_cache(const std::string& path) {
  std::string bytes = detail::read_file_bytes(path, "feature cache");
  ByteReader r(bytes, "feature cache");
  if (r.bytes(4) != "OEFC") throw FormatError("feature cache: bad magic in " + path);
  if (r.u16() != kFeatureFormatVersion) {
    throw FormatError("feature cache: unsupported version in " + path);
  }
  std::uint8_t pooling_tag = r.u8();
  if (pooling_tag > 1) throw FormatError("feature cache: unknown pooling tag");
  std::uint32_t k = r.u32();
  std::uint32_t count = r.u32();
  if (k == 0 || count == 0) throw FormatError("feature cache: empty header");

  std::vector<FeatureVector> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureVector f;
    f.pooling = pooling_tag == 0 ? Pooling::kMeanPool : Pooling::kFlatten;
    std::uint16_t len = r.u16();
    f.case_id = r.bytes(len);
    f.scan_index = static_cast<int>(r.u32());
    std::vector<double> values(k);
    for (std::uint32_t c = 0; c < k; ++c) values[c] = static_cast<double>(r.f32());
    f.values = Tensor({k}, std::move(values));
    out.push_back(std::move(f));
  }
  r.expect_end();
  return out;
}

}  // namespace oeseg
