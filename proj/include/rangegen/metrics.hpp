#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rangegen/extractors.hpp"
#include "rangegen/geometry.hpp"

namespace rangegen {

// ---- bird's-eye-view histograms ----

struct BevGrid {
    int cells = 0;            // grid is cells x cells
    double cell_size = 0.0;   // meters
    double half_extent = 0.0;  // cells * cell_size / 2
    std::vector<double> counts;  // row-major cells^2
    uint64_t dropped = 0;        // points outside the extent

    double total() const;
};

/// Counts points into a square top-down grid centered on the sensor.
/// cell = floor((coord + half_extent) / cell_size).
BevGrid bev_histogram(const PointCloud& cloud, int cells, double cell_size);

// JSD discretization (0.05 m cells on a 100 m square) and the coarser MMD
// grid (0.5 m cells) follow the evaluation protocol.
inline constexpr int kJsdCells = 2000;
inline constexpr double kJsdCellSize = 0.05;
inline constexpr int kMmdCells = 200;
inline constexpr double kMmdCellSize = 0.5;

/// Jensen-Shannon divergence (base-2, in [0,1]) between the pooled BEV
/// occupancy distributions of two scene sets.
double jsd(const std::vector<PointCloud>& set_r, const std::vector<PointCloud>& set_s);

/// Symmetric squared-distance Chamfer sum, evaluated with a k-d tree.
double chamfer(const PointCloud& x, const PointCloud& y);

struct EmdOptions {
    size_t exact_cap = 1024;
    bool allow_approx = false;
    double approx_epsilon = 0.05;  // entropic regularization strength
    int approx_iters = 500;
};

struct EmdResult {
    double value = 0.0;
    bool exact = true;
    double duality_gap = 0.0;  // reported for the approximate path
};

/// Earth mover's distance: minimum over bijections of summed Euclidean
/// distances. Exact assignment up to `exact_cap` points; beyond that the
/// entropic approximation must be requested explicitly.
EmdResult emd(const PointCloud& x, const PointCloud& y, const EmdOptions& opts = {});

/// Minimum matching distance: mean over reference clouds of the smallest
/// Chamfer distance to any synthesized cloud, computed on occupied-cell
/// centers of the coarse BEV.
double mmd(const std::vector<PointCloud>& set_r, const std::vector<PointCloud>& set_s);

// ---- Frechet pipeline ----

/// Splits a per-pixel activation map into P row bands (depth) or column
/// bands (angle), averages the valid pixels of each band per channel, and
/// concatenates top-to-bottom / left-to-right into a P*C vector. Empty
/// partitions contribute zeros (counted via empty_partitions).
std::vector<double> partition_aggregate(const nn::Tensor& activation_map,
                                        const std::vector<uint8_t>& mask, int partitions,
                                        AggregationMode mode,
                                        uint64_t* empty_partitions = nullptr);

/// Voxel-feature flavor: partitions are radial rings (depth) or yaw sectors
/// (angle) of the voxel centroids; ring width is max_range / P.
std::vector<double> partition_aggregate_voxels(
    const std::vector<ToyVoxelExtractor::VoxelFeature>& voxels, int channels, int partitions,
    AggregationMode mode, double max_range, uint64_t* empty_partitions = nullptr);

struct FeatureStats {
    std::vector<double> mu;
    std::vector<double> sigma;  // D x D row-major
    uint64_t n = 0;

    int dim() const { return static_cast<int>(mu.size()); }
};

/// Sample mean and unbiased covariance of feature vectors (n >= 2).
FeatureStats gaussian_stats(const std::vector<std::vector<double>>& vectors);

struct FrechetResult {
    double value = 0.0;
    double eigen_clamp = 0.0;  // total magnitude of clamped negative eigenvalues
};

/// Frechet distance (squared form) between two Gaussians:
/// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}).
FrechetResult frechet_distance(const FeatureStats& a, const FeatureStats& b);

// Stats cache "LFS1": magic, u32 D, u64 n, f64 mu[D], f64 sigma[D*D].
void save_stats(const FeatureStats& stats, const std::filesystem::path& path);
FeatureStats load_stats(const std::filesystem::path& path);

struct FrPipelineOptions {
    int partitions = 16;
    AggregationMode mode = AggregationMode::depth;
    std::optional<std::filesystem::path> ref_stats_cache;
    int workers = 1;  // feature extraction; reductions stay enumeration-ordered
};

struct FrPipelineResult {
    double value = 0.0;
    size_t ref_scenes = 0;
    size_t gen_scenes = 0;
    size_t failed_files = 0;
    uint64_t empty_partitions = 0;
    double eigen_clamp = 0.0;
    bool ref_stats_from_cache = false;
};

/// Full perceptual-metric pipeline over two directories/file lists of range
/// images: per-scene feature aggregation, per-set Gaussian fit, Frechet
/// distance. Aborts with InsufficientDataError when fewer than two scenes
/// per set are usable.
FrPipelineResult fr_pipeline(const std::vector<std::filesystem::path>& ref_files,
                             const std::vector<std::filesystem::path>& gen_files,
                             const FeatureExtractor& extractor,
                             const FrPipelineOptions& opts = {});

/// Same pipeline over in-memory images (used by tests and probes).
FrPipelineResult fr_pipeline_images(const std::vector<RangeImage>& ref,
                                    const std::vector<RangeImage>& gen,
                                    const FeatureExtractor& extractor,
                                    const FrPipelineOptions& opts = {});

// ---- voxelization ----

struct Voxel {
    long ix = 0, iy = 0, iz = 0;
    uint64_t count = 0;
    Point3 centroid;
    double z_min = 0.0, z_max = 0.0;
    double radius_sum = 0.0, radius_sq_sum = 0.0;
};

/// Deterministic voxel keys by floor division; per-voxel count, centroid and
/// member statistics. Output sorted by key.
std::vector<Voxel> voxelize_sparse(const PointCloud& cloud, double voxel_size);

/// Per-scene feature vector of one image under an extractor (range nets run
/// on the image; volume extractors voxelize the unprojected cloud).
std::vector<double> scene_feature_vector(const RangeImage& img,
                                         const FeatureExtractor& extractor, int partitions,
                                         AggregationMode mode,
                                         uint64_t* empty_partitions = nullptr);

}  // namespace rangegen
