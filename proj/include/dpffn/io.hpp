#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "dpffn/error.hpp"

namespace dpffn::io {

namespace fs = std::filesystem;

using Bytes = std::vector<std::uint8_t>;

/// Little-endian byte sink.
class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void bytes(std::string_view s) { raw(s.data(), s.size()); }

  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { uint(v); }
  void u32(std::uint32_t v) { uint(v); }
  void u64(std::uint64_t v) { uint(v); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  const Bytes& buffer() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

/// Little-endian byte source with bounds checking; errors name `what`.
class Reader {
 public:
  Reader(const Bytes& b, std::string what) : buf_(b), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw DataError(what_ + ": truncated at byte " + std::to_string(pos_));
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::uint8_t u8() { return uint<std::uint8_t>(); }
  std::uint16_t u16() { return uint<std::uint16_t>(); }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::uint64_t u64() { return uint<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }
  const std::string& what() const { return what_; }

 private:
  const Bytes& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::string read_text(const fs::path& path) {
  const auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

/// Writes to a sibling temp file, then renames over `path`.
inline void write_atomic(const fs::path& path, const void* data, std::size_t size) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw DataError("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

inline void write_atomic(const fs::path& path, const Bytes& b) { write_atomic(path, b.data(), b.size()); }
inline void write_atomic(const fs::path& path, std::string_view s) { write_atomic(path, s.data(), s.size()); }

}  // namespace dpffn::io
