#include "rangegen/extractors.hpp"

#include <cmath>
#include <fstream>

#include "rangegen/errors.hpp"
#include "rangegen/metrics.hpp"

namespace rangegen {

ToyRangeExtractor::ToyRangeExtractor(uint64_t seed, int base_channels, int out_channels)
    : out_channels_(out_channels) {
    Rng rng(seed);
    const int b = base_channels;
    enc0_ = nn::Conv2d(store_, "enc0", 2, b, 3, 3, 1, 1, rng);
    down1_ = nn::Conv2d(store_, "down1", b, 2 * b, 4, 4, 2, 2, rng);
    down2_ = nn::Conv2d(store_, "down2", 2 * b, 2 * b, 4, 4, 2, 2, rng);
    dec1_ = nn::Conv2d(store_, "dec1", 2 * b, b, 3, 3, 1, 1, rng);
    dec2_ = nn::Conv2d(store_, "dec2", b, b, 3, 3, 1, 1, rng);
    final_ = nn::Conv2d(store_, "final", 2 * b, out_channels, 3, 3, 1, 1, rng);
    // Frozen backbone: gradients may flow through it but never into it.
    for (const auto& [name, t] : store_.entries()) t.node()->requires_grad = false;
}

ToyRangeExtractor::Taps ToyRangeExtractor::taps(const nn::Tensor& input) const {
    if (input.ndim() != 3 || input.dim(0) != 2)
        throw std::invalid_argument("ToyRangeExtractor: expected [2,H,W] input");
    if (input.dim(1) % stride_product() != 0 || input.dim(2) % stride_product() != 0)
        throw DataError("ToyRangeExtractor: spatial dims must be divisible by " +
                        std::to_string(stride_product()));
    Taps taps;
    nn::Tensor e0 = nn::silu(enc0_.forward(input));
    nn::Tensor e1 = nn::silu(down1_.forward(e0));
    nn::Tensor e2 = nn::silu(down2_.forward(e1));
    taps.encoder = {e0, e1, e2};
    nn::Tensor d1 = nn::silu(dec1_.forward(nn::upsample_nearest(e2, 2, 2)));
    nn::Tensor d2 = nn::silu(dec2_.forward(nn::upsample_nearest(d1, 2, 2)));
    nn::Tensor out = final_.forward(nn::concat_channels({d2, e0}));
    taps.decoder = {d1, d2, out};
    return taps;
}

nn::Tensor ToyRangeExtractor::final_activation(const nn::Tensor& input) const {
    return taps(input).decoder.back();
}

std::vector<double> ToyRangeExtractor::scene_features(const std::filesystem::path&,
                                                      const RangeImage& img, int partitions,
                                                      AggregationMode mode,
                                                      uint64_t* empty_partitions) const {
    nn::NoGradGuard no_grad;
    const nn::Tensor act = final_activation(input_from_image(img));
    return partition_aggregate(act, img.mask(), partitions, mode, empty_partitions);
}

nn::Tensor ToyRangeExtractor::input_from_image(const RangeImage& img) {
    const int height = img.cfg.height, width = img.cfg.width;
    const int64_t plane = static_cast<int64_t>(height) * width;
    std::vector<double> data(2 * plane, 0.0);
    for (int64_t i = 0; i < plane; ++i) {
        const float d = img.depth[i];
        if (d >= 0.0f) {
            data[i] = 2.0 * encode_depth(d, img.cfg) - 1.0;
            data[plane + i] = 1.0;
        } else {
            data[i] = -1.0;  // v = 0 at invalid pixels
        }
    }
    return nn::Tensor::from_data({2, height, width}, std::move(data));
}

ToyVoxelExtractor::ToyVoxelExtractor(Modality modality, double voxel_size)
    : modality_(modality), voxel_size_(voxel_size) {
    if (modality == Modality::range_image)
        throw ConfigError("ToyVoxelExtractor: range_image modality not supported");
    if (!(voxel_size > 0.0)) throw ConfigError("ToyVoxelExtractor: voxel_size must be positive");
}

std::vector<ToyVoxelExtractor::VoxelFeature> ToyVoxelExtractor::features(
    const PointCloud& cloud) const {
    std::vector<VoxelFeature> out;
    for (const Voxel& vox : voxelize_sparse(cloud, voxel_size_)) {
        VoxelFeature vf;
        vf.centroid = vox.centroid;
        const double cx = (vox.ix + 0.5) * voxel_size_;
        const double cy = (vox.iy + 0.5) * voxel_size_;
        const double cz = (vox.iz + 0.5) * voxel_size_;
        vf.feature = {std::log1p(static_cast<double>(vox.count)),
                      (vox.centroid.x - cx) / voxel_size_,
                      (vox.centroid.y - cy) / voxel_size_,
                      (vox.centroid.z - cz) / voxel_size_,
                      vox.centroid.z,
                      vox.z_max - vox.z_min};
        if (modality_ == Modality::point_volume) {
            const double mean_r = vox.radius_sum / static_cast<double>(vox.count);
            const double var_r =
                std::max(0.0, vox.radius_sq_sum / static_cast<double>(vox.count) -
                                  mean_r * mean_r);
            vf.feature.push_back(mean_r);
            vf.feature.push_back(std::sqrt(var_r));
        }
        out.push_back(std::move(vf));
    }
    return out;
}

std::vector<double> ToyVoxelExtractor::scene_features(const std::filesystem::path&,
                                                      const RangeImage& img, int partitions,
                                                      AggregationMode mode,
                                                      uint64_t* empty_partitions) const {
    return partition_aggregate_voxels(features(unproject(img)), channels(), partitions, mode,
                                      img.cfg.max_range, empty_partitions);
}

std::vector<double> ExternalFeatureExtractor::scene_features(
    const std::filesystem::path& source, const RangeImage&, int, AggregationMode,
    uint64_t*) const {
    if (source.empty())
        throw DataError("external extractor: needs file-backed scenes (<scene>.feat)");
    std::filesystem::path feat = source;
    feat += ".feat";
    std::ifstream is(feat, std::ios::binary);
    if (!is) throw IoError("external extractor: missing feature file " + feat.string());
    uint32_t dim = 0;
    is.read(reinterpret_cast<char*>(&dim), 4);
    if (!is || dim == 0 || dim > (1u << 20))
        throw FormatError("external extractor: bad feature header in " + feat.string());
    std::vector<double> v(dim);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(dim * 8));
    if (!is) throw FormatError("external extractor: truncated " + feat.string());
    return v;
}

}  // namespace rangegen
