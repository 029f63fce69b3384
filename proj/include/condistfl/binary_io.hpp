#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "condistfl/errors.hpp"

namespace condistfl::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Appends little-endian scalars and raw payloads to a byte buffer.
class ByteWriter {
 public:
  template <typename U>
  void put(U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }

  template <typename U>
  void put_span(std::span<const U> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    bytes_.insert(bytes_.end(), p, p + values.size_bytes());
  }

  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Reads what ByteWriter wrote; running past the end raises TruncatedFileError.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename U>
  U get() {
    U value;
    std::memcpy(&value, take(sizeof(U)), sizeof(U));
    return value;
  }

  template <typename U>
  void get_span(std::span<U> out) {
    std::memcpy(out.data(), take(out.size_bytes()), out.size_bytes());
  }

  std::string get_string(std::size_t length) {
    const auto* p = take(length);
    return std::string(reinterpret_cast<const char*>(p), length);
  }

  bool at_end() const { return offset_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - offset_; }
  const std::string& source() const { return source_; }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (n > remaining()) {
      throw TruncatedFileError(source_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " +
                               std::to_string(offset_) + ", " + std::to_string(remaining()) + " left)");
    }
    const auto* p = bytes_.data() + offset_;
    offset_ += n;
    return p;
  }

  std::span<const std::uint8_t> bytes_;
  std::string source_;
  std::size_t offset_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace condistfl::io
