#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct ArrayEntry {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint32_t> dims;
  // f32 entries hold values exactly representable as float.
  std::vector<double> values;

  Tensor to_tensor() const;
};

/// Named-array container.
///
/// Layout (little-endian): "S2LR", u16 version, u32 count; per entry a u16
/// name length and UTF-8 name, u8 dtype, u8 rank, u32 dims, raw values;
/// trailer u32 CRC-32 of every preceding byte.
class Checkpoint {
 public:
  static constexpr std::uint16_t kVersion = 1;

  /// Adds an entry; names must be unique. f32 rounds the values to float.
  void add(std::string name, const Tensor& tensor, DType dtype = DType::f64);
  void add(ArrayEntry entry);

  const std::vector<ArrayEntry>& entries() const { return entries_; }
  const ArrayEntry* find(std::string_view name) const;
  const ArrayEntry& at(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  /// Writes to a sibling temporary file and renames it into place.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<ArrayEntry> entries_;
};

/// Atomically replaces `path` with `bytes` (temporary file plus rename).
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace peftlab
