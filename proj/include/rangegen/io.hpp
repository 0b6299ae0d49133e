#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rangegen/geometry.hpp"

namespace rangegen {

// LRI1 range-image container: magic "LRI1"; u32 H, u32 W; f32 fov_up_deg,
// f32 fov_down_deg, f32 omega, f32 max_range; H*W f32 depths row-major with
// -1.0 marking invalid pixels. All fields little-endian.
RangeImage load_lri(const std::filesystem::path& path);
void save_lri(const RangeImage& img, const std::filesystem::path& path);

// KITTI-style point file: headerless little-endian f32 records
// (x, y, z, intensity), 16 bytes per point.
PointCloud load_kitti_bin(const std::filesystem::path& path);
void save_kitti_bin(const PointCloud& cloud, const std::filesystem::path& path);

// Token file: u32 count, u32 dim, then count*dim f32 values.
std::vector<std::vector<double>> load_tokens(const std::filesystem::path& path);
void save_tokens(const std::vector<std::vector<double>>& tokens,
                 const std::filesystem::path& path);

// FNV-1a 64-bit, used for dataset manifests.
uint64_t fnv1a64(const void* data, size_t size);
uint64_t fnv1a64_file(const std::filesystem::path& path);

/// Lists .lri files in a directory in lexicographic order. Throws IoError if
/// the directory does not exist.
std::vector<std::filesystem::path> list_lri_files(const std::filesystem::path& dir);

/// Writes a grayscale PGM preview of a range image (v values; invalid black).
void save_pgm(const RangeImage& img, const std::filesystem::path& path);

}  // namespace rangegen
