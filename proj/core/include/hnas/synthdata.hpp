#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hnas/regmath.hpp"
#include "hnas/tensor.hpp"

namespace hnas {

/// Intensities [1, C, S...] plus a label map over S. C = 1 for images; vector
/// fields are stored with C = d and all-zero labels.
struct LabeledVolume {
  Tensor intensity;
  LabelMap labels;
  std::string meta;  ///< free-form "key=value" lines
};

struct VolumeSpec {
  Shape size{64, 64};
  /// Distinct label values including background; labels are 0 … label_count − 1.
  int label_count = 6;
  /// Gaussian width (voxels) of the random fields the regions are cut from.
  double blob_sigma = 3.0;
  double texture = 0.08;  ///< amplitude of smooth intensity noise
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr int kGeneratorVersion = 1;

LabeledVolume generate_volume(const VolumeSpec& spec);

/// Separable Gaussian smoothing of every channel of x[1, C, S...] with clamped borders.
Tensor gaussian_smooth(const Tensor& x, double sigma);

/// Smooth random velocity [1, d, S...] with ‖v‖∞ = scale.
VelocityField random_velocity(const Shape& spatial, double scale, double sigma, std::uint64_t seed);

enum class Split { Train, Val, Test };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct RegistrationPair {
  LabeledVolume fixed;
  LabeledVolume moving;
  std::optional<VelocityField> gt_velocity;  ///< maps fixed to moving coordinates: moving ∘ exp(v) ≈ fixed
  Split split = Split::Train;
};

/// moving = base ∘ exp(−v) (labels by nearest neighbour), fixed = base.
/// Throws NumericError if exp(v) folds (non-positive Jacobian determinant).
RegistrationPair generate_pair(const LabeledVolume& base, double warp_scale, double warp_sigma, std::uint64_t seed);

struct DatasetSpec {
  VolumeSpec volume;
  double warp_scale = 12.0;  ///< ‖v‖∞ in voxels
  double warp_sigma = 10.0;
  int train = 40;
  int val = 10;
  int test = 10;
  std::uint64_t seed = 0;

  int total() const { return train + val + test; }
  Split split_of(int index) const;
  /// Seed-stream tag of a pair: split name plus index within the split, so a
  /// split's pairs do not depend on the sizes of the other splits.
  std::string pair_tag(int index) const;
  void validate() const;
};

/// Pair `index` of the dataset; every pair has its own base volume.
RegistrationPair generate_dataset_pair(const DatasetSpec& spec, int index);
std::vector<RegistrationPair> generate_dataset(const DatasetSpec& spec);

struct ManifestEntry {
  std::string id;
  Split split = Split::Train;
  std::uint64_t seed = 0;
  std::string fixed;
  std::string moving;
  std::string velocity;  ///< empty when no ground truth exists
};

struct Manifest {
  DatasetSpec spec;
  std::vector<ManifestEntry> pairs;

  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);
};

/// Writes every pair under `dir` plus manifest.json and returns the manifest.
Manifest write_dataset(const DatasetSpec& spec, const std::filesystem::path& dir);
/// Loads the pairs of `split` (all pairs when absent); paths are relative to `dir`.
std::vector<RegistrationPair> load_dataset(const Manifest& manifest, const std::filesystem::path& dir,
                                           std::optional<Split> split = std::nullopt);

/// HNRG: "HNRG", u16 version, u8 dtype code (2 = float64), u8 rank, rank × u32
/// extents [C, S...], C·voxels f64 intensities, voxels × u16 labels, then a
/// u32-prefixed UTF-8 metadata trailer. All little-endian.
inline constexpr std::uint16_t kVolumeVersion = 1;
std::vector<char> encode_volume(const LabeledVolume& v);
LabeledVolume decode_volume(std::span<const char> bytes);
void write_volume(const std::filesystem::path& path, const LabeledVolume& v);
LabeledVolume read_volume(const std::filesystem::path& path);

/// Wraps a vector field as a volume with zero labels.
LabeledVolume field_volume(const Tensor& field, std::string meta);

/// Foreground labels 1 … label_count − 1.
std::vector<int> foreground_labels(int label_count);

}  // namespace hnas
