#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hamobe/tensor.hpp"

namespace hamobe {

enum class Split { Train, Query, Gallery };

std::string_view to_string(Split split) noexcept;
Split parse_split(std::string_view text);

// Multi-layer token features of one tracklet: data is [T x K x C] with the CLS
// token at k = 0 and C = 4 * d (four tapped layers concatenated).
struct FeatureVolume {
  Tensor data;
  int subject_id = 0;
  int tracklet_id = 0;
  std::optional<int> clothes_id;
  int camera_id = 0;

  std::size_t frames() const { return data.dim(0); }
  std::size_t tokens() const { return data.dim(1); }
  std::size_t channels() const { return data.dim(2); }
};

// Header layout of an HFV1 file (24 bytes, little-endian):
//   "HFV1" | u32 version=1 | u32 T | u32 K | u32 C | u8 dtype (0=f32) | 3 zero bytes
// followed by T*K*C f32 values in t, k, c order (c fastest).
inline constexpr std::uint32_t kHfv1Version = 1;
inline constexpr std::size_t kHfv1HeaderBytes = 24;

struct Hfv1Header {
  std::uint32_t version = kHfv1Version;
  std::uint32_t frames = 0;
  std::uint32_t tokens = 0;
  std::uint32_t channels = 0;
  std::uint8_t dtype = 0;
};

// Values are narrowed to f32 on write.
void write_volume(const Tensor& data, const std::filesystem::path& path);
Tensor read_volume(const std::filesystem::path& path);
Hfv1Header read_header(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_volume(const Tensor& data);
Tensor decode_volume(const std::vector<std::uint8_t>& bytes);

struct ManifestRecord {
  std::string path;  // relative paths resolve against the manifest directory
  int subject_id = 0;
  int tracklet_id = 0;
  std::optional<int> clothes_id;
  int camera_id = 0;
  Split split = Split::Train;
};

struct Manifest {
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestRecord& r) const;
};

// JSON-lines, one object per record with keys
// path, subject_id, tracklet_id, clothes_id, camera_id, split.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Checks unique paths and that every train subject has >= 2 tracklets.
void validate_manifest(const Manifest& manifest);

// Manifest plus its parsed volumes, aligned by index.
struct Dataset {
  Manifest manifest;
  std::vector<FeatureVolume> volumes;

  std::vector<std::size_t> indices(Split split) const;
};

Dataset load_dataset(const std::filesystem::path& manifest_path);
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir,
                  const std::string& manifest_name = "manifest.jsonl");

}  // namespace hamobe
