#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "voxadapt/data.hpp"

namespace voxadapt {

/// "voxel D D D" followed by D^3 values, z fastest, one (x, y) row per line.
void write_voxel(const std::filesystem::path& path, const VoxelGrid& grid);
VoxelGrid read_voxel(const std::filesystem::path& path);

/// Plain (P2) 8-bit PGM of a [1,H,W] or [H,W] image in [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor& image);
/// [1,H,W] image with values level / maxval.
Tensor read_pgm(const std::filesystem::path& path);

struct ManifestRow {
  std::size_t item_id = 0;
  std::string kind;
  std::string path;  ///< relative to the manifest's directory
  std::optional<double> azimuth;
  std::optional<std::size_t> pair_id;
  bool operator==(const ManifestRow&) const = default;
};

inline constexpr const char* kManifestHeader = "item_id,kind,path,azimuth,pair_id";

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

/// Flat "key = value" configuration text with '#' comments.
using ConfigMap = std::map<std::string, std::string>;
ConfigMap parse_config_text(const std::string& text);
ConfigMap read_config_file(const std::filesystem::path& path);
std::string format_config(const ConfigMap& config);

ConfigMap dataset_config_map(const DatasetConfig& config);
DatasetConfig dataset_config_from_map(const ConfigMap& map);

/// Writes dataset.cfg, voxels/, synth/, real/, test_real/ and manifest.csv.
/// Returns the manifest rows.
std::vector<ManifestRow> write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// Rebuilds the dataset described by `dir`/dataset.cfg.
Dataset load_dataset(const std::filesystem::path& dir);

/// Shortest text that reads back as exactly `v`.
std::string format_double(double v);

/// Strict whole-string number parsing; `what` names the source in errors.
double parse_config_double(std::string_view text, const std::string& what);
std::uint64_t parse_config_uint(std::string_view text, const std::string& what);
bool parse_config_bool(std::string_view text, const std::string& what);

}  // namespace voxadapt
