#pragma once

// Little-endian byte packing shared by the binary format readers/writers.

#include <cstdint>
#include <cstring>
#include <string>

#include "oeseg/error.hpp"

namespace oeseg::detail {

inline void put_u8(std::string& buf, std::uint8_t v) { buf.push_back(static_cast<char>(v)); }

inline void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string what)
      : data_(&data), what_(std::move(what)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

  std::uint16_t u16() {
    const char* p = take(2);
    return static_cast<std::uint16_t>(static_cast<std::uint8_t>(p[0]) |
                                      (static_cast<std::uint8_t>(p[1]) << 8));
  }

  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(p[i])) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    const char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(p[i])) << (8 * i);
    return v;
  }

  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n) { return std::string(take(n), n); }

  std::size_t offset() const { return off_; }
  std::size_t remaining() const { return data_->size() - off_; }

  void expect_end() const {
    if (off_ != data_->size()) throw FormatError(what_ + ": trailing bytes");
  }

 private:
  const char* take(std::size_t n) {
    if (off_ + n > data_->size()) throw FormatError(what_ + ": truncated file");
    const char* p = data_->data() + off_;
    off_ += n;
    return p;
  }

  const std::string* data_;
  std::string what_;
  std::size_t off_ = 0;
};

std::string read_file_bytes(const std::string& path, const std::string& what);
void write_file_bytes(const std::string& path, const std::string& bytes,
                      const std::string& what);

}  // namespace oeseg::detail
