#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ltn/errors.hpp"

namespace ltn::io {

std::vector<char> read_file(const std::filesystem::path& path);

/// Little-endian byte sink for the versioned binary containers.
class BinaryWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }

  const std::vector<char>& buffer() const noexcept { return buf_; }

  /// Write the buffer to `path`; throws DataError when the file cannot be written.
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<char> buf_;
};

/// Bounds-checked reader; running off the end raises TruncatedError.
class BinaryReader {
 public:
  explicit BinaryReader(std::vector<char> data) : data_(std::move(data)) {}

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string str(std::size_t max_len = 1u << 20) {
    const std::uint32_t n = u32();
    if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
    return bytes(n);
  }

  bool at_end() const noexcept { return pos_ == data_.size(); }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw TruncatedError("unexpected end of data at byte " + std::to_string(pos_) + " (needed " +
                           std::to_string(n) + " more)");
    }
  }

  std::vector<char> data_;
  std::size_t pos_ = 0;
};

}  // namespace ltn::io
