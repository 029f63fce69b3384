#pragma once

// Named float32 parameter arrays exchanged between server and clients.
//
// File layout (little-endian):
//   "CDFL" | version u32 | entry count u32 | round u32 | step u64 |
//   per entry: name length u16, UTF-8 name, rank u8, extents u32 x rank, float32 payload

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "condistfl/binary_io.hpp"
#include "condistfl/tensor.hpp"

namespace condistfl {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;

  bool operator==(const CheckpointEntry&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t round = 0;
  std::uint64_t step = 0;
  std::vector<CheckpointEntry> entries;

  bool operator==(const Checkpoint&) const = default;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.data.size();
    return n;
  }

  /// True when both checkpoints list the same names with the same shapes, in order.
  bool congruent_with(const Checkpoint& other) const {
    if (entries.size() != other.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].name != other.entries[i].name || entries[i].shape != other.entries[i].shape) return false;
    }
    return true;
  }
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.put_bytes("CDFL");
  w.put<std::uint32_t>(Checkpoint::kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.entries.size()));
  w.put<std::uint32_t>(ckpt.round);
  w.put<std::uint64_t>(ckpt.step);
  for (const auto& e : ckpt.entries) {
    if (e.name.size() > 0xFFFF) throw FormatError("parameter name too long: " + e.name.substr(0, 32) + "...");
    if (e.shape.size() > 0xFF) throw FormatError("parameter rank too large: " + e.name);
    if (numel_of(e.shape) != e.data.size()) throw ShapeError("checkpoint entry " + e.name + " has inconsistent shape");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto extent : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(extent));
    w.put_span(std::span<const float>(e.data));
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "checkpoint") {
  io::ByteReader r(bytes, source);
  if (r.get_string(4) != "CDFL") throw BadMagicError(source + ": not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw VersionMismatchError(source + ": checkpoint version " + std::to_string(version) + ", expected " +
                               std::to_string(Checkpoint::kVersion));
  }
  const auto count = r.get<std::uint32_t>();
  Checkpoint ckpt;
  ckpt.round = r.get<std::uint32_t>();
  ckpt.step = r.get<std::uint64_t>();
  ckpt.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.get_string(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint32_t>());
    const std::size_t n = numel_of(e.shape);
    if (n * sizeof(float) > r.remaining()) {
      throw TruncatedFileError(source + ": truncated payload for parameter " + e.name);
    }
    e.data.resize(n);
    r.get_span(std::span<float>(e.data));
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.at_end()) throw FormatError(source + ": trailing bytes after last entry");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_checkpoint(bytes, path.string());
}

}  // namespace condistfl
