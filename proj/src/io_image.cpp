#include <png.h>

#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "io_util.hpp"
#include "oeseg/io.hpp"

namespace fs = std::filesystem;

namespace oeseg {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::uint8_t> quantize(const Tensor& values) {
  std::vector<std::uint8_t> bytes(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    double v = std::min(1.0, std::max(0.0, values[i]));
    bytes[i] = static_cast<std::uint8_t>(std::llround(v * 255.0));
  }
  return bytes;
}

void write_pgm(const std::string& path, std::size_t h, std::size_t w,
               const std::vector<std::uint8_t>& bytes) {
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  detail::write_file_bytes(path, out, "pgm image");
}

Tensor read_pgm(const std::string& path) {
  std::string bytes = detail::read_file_bytes(path, "pgm image");
  std::istringstream in(bytes);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2") throw DataError("unsupported PGM magic in " + path);
  auto next_token = [&]() {
    std::string tok;
    while (in >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
    throw DataError("truncated PGM header in " + path);
  };
  std::size_t w = std::stoul(next_token());
  std::size_t h = std::stoul(next_token());
  std::size_t maxval = std::stoul(next_token());
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
    throw DataError("unsupported PGM geometry in " + path);
  }
  std::vector<double> data(h * w);
  if (magic == "P5") {
    std::size_t start = static_cast<std::size_t>(in.tellg()) + 1;  // one whitespace byte
    if (start + h * w > bytes.size()) throw DataError("truncated PGM payload in " + path);
    for (std::size_t i = 0; i < h * w; ++i) {
      data[i] = static_cast<double>(static_cast<std::uint8_t>(bytes[start + i])) /
                static_cast<double>(maxval);
    }
  } else {
    for (std::size_t i = 0; i < h * w; ++i) {
      data[i] = std::stod(next_token()) / static_cast<double>(maxval);
    }
  }
  return Tensor({h, w, 1}, std::move(data));
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

void write_png(const std::string& path, std::size_t h, std::size_t w,
               const std::vector<std::uint8_t>& bytes) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("png: cannot create " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png: initialization failure for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png: write failure on " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + y * w));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: initialization failure for " + path);
  }
  std::vector<std::uint8_t> pixels;
  std::size_t w = 0, h = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: unreadable file " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray(png, PNG_ERROR_ACTION_NONE, -1, -1);
  }
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != w) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: unexpected row layout in " + path);
  }
  pixels.resize(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    png_read_row(png, pixels.data() + y * w, nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::vector<double> data(h * w);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = pixels[i] / 255.0;
  return Tensor({h, w, 1}, std::move(data));
}

}  // namespace

void write_image(const std::string& path, const Tensor& values) {
  if (values.rank() != 2 && !(values.rank() == 3 && values.dim(2) == 1)) {
    throw DimensionError("write_image: expected an HxW tensor");
  }
  std::size_t h = values.dim(0), w = values.dim(1);
  std::vector<std::uint8_t> bytes = quantize(values);
  if (ends_with(path, ".png")) {
    write_png(path, h, w, bytes);
  } else if (ends_with(path, ".pgm")) {
    write_pgm(path, h, w, bytes);
  } else {
    throw ConfigError("write_image: unsupported extension on " + path);
  }
}

Tensor read_image(const std::string& path) {
  if (ends_with(path, ".png")) return read_png(path);
  if (ends_with(path, ".pgm")) return read_pgm(path);
  throw DataError("read_image: unsupported extension on " + path);
}

void save_dataset(const std::string& root, const Dataset& records,
                  const std::string& image_format) {
  if (image_format != "png" && image_format != "pgm") {
    throw ConfigError("save_dataset: image format must be png or pgm");
  }
  fs::create_directories(root);
  for (const BScanRecord& r : records) {
    fs::path dir = fs::path(root) / r.case_id;
    fs::create_directories(dir);
    std::string stem = std::to_string(r.scan_index) + "." + image_format;
    Tensor image2d({r.image.dim(0), r.image.dim(1)},
                   std::vector<double>(r.image.data().begin(), r.image.data().end()));
    write_image((dir / ("scan_" + stem)).string(), image2d);
    if (r.has_mask()) {
      write_image((dir / ("mask_" + stem)).string(), r.mask);
    }
  }
}

Dataset load_dataset(const std::string& root) {
  if (!fs::is_directory(root)) throw DataError("load_dataset: no such directory " + root);

  std::vector<std::string> case_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) case_dirs.push_back(entry.path().filename().string());
  }
  std::sort(case_dirs.begin(), case_dirs.end());

  auto parse_index = [](const std::string& name, const std::string& prefix) -> int {
    // "<prefix>_<digits>.<ext>" or -1 when the name does not match.
    if (name.rfind(prefix + "_", 0) != 0) return -1;
    std::size_t start = prefix.size() + 1;
    std::size_t dot = name.find('.', start);
    if (dot == std::string::npos || dot == start) return -1;
    std::string ext = name.substr(dot + 1);
    if (ext != "png" && ext != "pgm") return -1;
    for (std::size_t i = start; i < dot; ++i) {
      if (!std::isdigit(static_cast<unsigned char>(name[i]))) return -1;
    }
    return std::stoi(name.substr(start, dot - start));
  };

  Dataset records;
  for (const std::string& case_id : case_dirs) {
    fs::path dir = fs::path(root) / case_id;
    std::vector<std::pair<int, std::string>> scans, masks;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      std::string name = entry.path().filename().string();
      int scan = parse_index(name, "scan");
      int mask = parse_index(name, "mask");
      if (scan >= 0) scans.emplace_back(scan, entry.path().string());
      if (mask >= 0) masks.emplace_back(mask, entry.path().string());
    }
    std::sort(scans.begin(), scans.end());
    std::sort(masks.begin(), masks.end());

    for (const auto& [idx, mask_path] : masks) {
      bool paired = std::any_of(scans.begin(), scans.end(),
                                [&](const auto& s) { return s.first == idx; });
      if (!paired) throw DataError("load_dataset: orphan mask " + mask_path);
    }

    for (const auto& [idx, scan_path] : scans) {
      BScanRecord r;
      r.case_id = case_id;
      r.scan_index = idx;
      r.image = read_image(scan_path);
      for (const auto& [midx, mask_path] : masks) {
        if (midx != idx) continue;
        Tensor m = read_image(mask_path);
        if (m.dim(0) != r.image.dim(0) || m.dim(1) != r.image.dim(1)) {
          throw DataError("load_dataset: mask size mismatch at " + mask_path);
        }
        r.mask = binarize(Tensor({m.dim(0), m.dim(1)},
                                 std::vector<double>(m.data().begin(), m.data().end())),
                          0.5);
      }
      records.push_back(std::move(r));
    }
  }
  if (records.empty()) throw DataError("load_dataset: no cases under " + root);
  return records;
}

}  // namespace oeseg
