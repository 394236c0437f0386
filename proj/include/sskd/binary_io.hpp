#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sskd/errors.hpp"

namespace sskd {

// Little-endian encoder used by every on-disk format.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void raw(std::span<const std::uint8_t> s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put(std::uint32_t v, int width) {
    for (int i = 0; i < width; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked decoder; every failure is a ParseError carrying the offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1, "u8")); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2, "u16")); }
  std::uint32_t u32() { return get(4, "u32"); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string_view raw(std::size_t n, const char* what) {
    require(n, what);
    std::string_view out(reinterpret_cast<const char*>(bytes_.data() + offset_), n);
    offset_ += n;
    return out;
  }
  std::span<const std::uint8_t> span(std::size_t n, const char* what) {
    require(n, what);
    auto out = bytes_.subspan(offset_, n);
    offset_ += n;
    return out;
  }

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return bytes_.size() - offset_; }
  std::size_t size() const { return bytes_.size(); }

  void require(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw ParseError(offset_, std::string("truncated while reading ") + what + ": need " + std::to_string(n) +
                                    " bytes, " + std::to_string(remaining()) + " left (file length " +
                                    std::to_string(bytes_.size()) + ")");
    }
  }

 private:
  std::uint32_t get(int width, const char* what) {
    require(static_cast<std::size_t>(width), what);
    std::uint32_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint32_t>(bytes_[offset_ + i]) << (8 * i);
    offset_ += static_cast<std::size_t>(width);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t offset_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// CRC-32 (zlib polynomial) of a byte range.
std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace sskd
