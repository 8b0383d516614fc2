#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hnas/searchspace.hpp"
#include "hnas/tensor.hpp"

namespace hnas {

/// Flat container behind every checkpoint file: ordered text entries plus
/// named float64 tensors.
///
/// File layout (little-endian): "HNCK", u16 version, u32 entry count, then
/// (u32-prefixed key, u32-prefixed value) pairs, u32 tensor count, then per
/// tensor a u32-prefixed name, u8 rank, u64 extents and f64 values.
struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> entries;
  std::vector<NamedTensor> tensors;

  void set(std::string key, std::string value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  void add_tensor(std::string name, const Tensor& t);
  const Tensor& tensor(const std::string& name) const;
  /// Copies the stored values of `name` into the leaf `dst` (shapes must match).
  void load_into(const std::string& name, Tensor& dst) const;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);
std::vector<char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const char> bytes);

}  // namespace hnas
