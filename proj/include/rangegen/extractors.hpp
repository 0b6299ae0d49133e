#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "rangegen/geometry.hpp"
#include "rangegen/nn/modules.hpp"

namespace rangegen {

enum class AggregationMode { depth, angle };

/// Pluggable feature backbone for perceptual metrics. Implementations must
/// be deterministic with a fixed channel count. scene_features returns the
/// partition-aggregated P*C descriptor of one scene; `source` names the
/// originating file when there is one (used by the external hook).
class FeatureExtractor {
  public:
    enum class Modality { range_image, sparse_volume, point_volume };

    virtual ~FeatureExtractor() = default;
    virtual Modality modality() const = 0;
    virtual int channels() const = 0;
    virtual int stride_product() const = 0;
    virtual std::string name() const = 0;
    virtual std::vector<double> scene_features(const std::filesystem::path& source,
                                               const RangeImage& img, int partitions,
                                               AggregationMode mode,
                                               uint64_t* empty_partitions) const = 0;
};

/// Small frozen encoder-decoder over (v, mask) range inputs with circular
/// horizontal padding, one skip connection, and a full-resolution final
/// activation map. Weights are a pure function of the seed.
class ToyRangeExtractor : public FeatureExtractor {
  public:
    explicit ToyRangeExtractor(uint64_t seed = 7, int base_channels = 16,
                               int out_channels = 32);

    Modality modality() const override { return Modality::range_image; }
    int channels() const override { return out_channels_; }
    int stride_product() const override { return 4; }
    std::string name() const override { return "toy-range"; }

    /// Final-stage activation map [C,H,W] for a [2,H,W] input.
    nn::Tensor final_activation(const nn::Tensor& input) const;

    struct Taps {
        std::vector<nn::Tensor> encoder;  // per encoder stage
        std::vector<nn::Tensor> decoder;  // per decoder stage; back() is the final map
    };
    Taps taps(const nn::Tensor& input) const;

    std::vector<double> scene_features(const std::filesystem::path& source,
                                       const RangeImage& img, int partitions,
                                       AggregationMode mode,
                                       uint64_t* empty_partitions) const override;

    /// Builds the [2,H,W] network input (v normalized to [-1,1], mask) of an image.
    static nn::Tensor input_from_image(const RangeImage& img);

  private:
    nn::ParamStore store_;
    nn::Conv2d enc0_, down1_, down2_, dec1_, dec2_, final_;
    int out_channels_;
};

/// Hand-crafted per-voxel descriptors for the volume modalities: centroid
/// offset inside the voxel, log count, and height statistics; the
/// point-volume flavor appends radial statistics of the member points.
class ToyVoxelExtractor : public FeatureExtractor {
  public:
    explicit ToyVoxelExtractor(Modality modality = Modality::sparse_volume,
                               double voxel_size = 0.5);

    Modality modality() const override { return modality_; }
    int channels() const override { return modality_ == Modality::point_volume ? 8 : 6; }
    int stride_product() const override { return 1; }
    std::string name() const override {
        return modality_ == Modality::point_volume ? "toy-point-volume" : "toy-voxel";
    }
    double voxel_size() const { return voxel_size_; }

    struct VoxelFeature {
        Point3 centroid;
        std::vector<double> feature;
    };
    std::vector<VoxelFeature> features(const PointCloud& cloud) const;

    std::vector<double> scene_features(const std::filesystem::path& source,
                                       const RangeImage& img, int partitions,
                                       AggregationMode mode,
                                       uint64_t* empty_partitions) const override;

  private:
    Modality modality_;
    double voxel_size_;
};

/// Hook for externally computed backbones: reads the already aggregated
/// descriptor from "<scene>.feat" next to each range image (u32 dim, then
/// f64 values, little-endian).
class ExternalFeatureExtractor : public FeatureExtractor {
  public:
    ExternalFeatureExtractor() = default;

    Modality modality() const override { return Modality::range_image; }
    int channels() const override { return 0; }  // determined by the files
    int stride_product() const override { return 1; }
    std::string name() const override { return "external"; }

    std::vector<double> scene_features(const std::filesystem::path& source,
                                       const RangeImage& img, int partitions,
                                       AggregationMode mode,
                                       uint64_t* empty_partitions) const override;
};

}  // namespace rangegen
