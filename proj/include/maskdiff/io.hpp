#pragma once

// Little-endian binary helpers shared by the checkpoint, codebook, token
// dataset and condition sidecar formats. Every file starts with an 8-byte
// magic string and a u32 format version.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "maskdiff/common.hpp"

namespace maskdiff::io {

using Magic = std::array<char, 8>;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void header(const Magic& magic, std::uint32_t version) {
    out_.write(magic.data(), magic.size());
    u32(version);
  }
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v), 8); }

  void check() const {
    if (!out_) throw IoError("write failed");
  }

 private:
  void put_le(std::uint64_t v, int bytes) {
    char buf[8];
    for (int k = 0; k < bytes; ++k) buf[k] = static_cast<char>((v >> (8 * k)) & 0xFF);
    out_.write(buf, bytes);
  }
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  /// Reads and checks the magic; returns the version.
  std::uint32_t header(const Magic& magic) {
    Magic got{};
    in_.read(got.data(), got.size());
    if (!in_ || got != magic) throw IoError(what_ + ": bad magic (not a " + what_ + " file)");
    return u32();
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  double f64() { return std::bit_cast<double>(get_le(8)); }

  /// Throws unless the stream is exhausted.
  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) throw IoError(what_ + ": trailing bytes");
  }

 private:
  std::uint64_t get_le(int bytes) {
    unsigned char buf[8];
    in_.read(reinterpret_cast<char*>(buf), bytes);
    if (!in_) throw IoError(what_ + ": truncated file");
    std::uint64_t v = 0;
    for (int k = 0; k < bytes; ++k) v |= static_cast<std::uint64_t>(buf[k]) << (8 * k);
    return v;
  }
  std::istream& in_;
  std::string what_;
};

constexpr Magic make_magic(std::string_view s) {
  Magic m{};
  for (std::size_t k = 0; k < m.size() && k < s.size(); ++k) m[k] = s[k];
  return m;
}

}  // namespace maskdiff::io
