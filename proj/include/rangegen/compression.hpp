#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rangegen/checkpoint.hpp"
#include "rangegen/config.hpp"
#include "rangegen/extractors.hpp"
#include "rangegen/geometry.hpp"
#include "rangegen/nn/modules.hpp"

namespace rangegen {

struct CompressionConfig {
    int f_c = 2;  // curve-wise horizontal factor, power of two
    int f_p = 4;  // patch-wise factor, power of two
    int latent_dim = 8;
    int codebook_size = 16384;
    int base_channels = 32;
    int num_res_blocks = 2;
    double lambda_coord = 0.1;
    double lambda_mask = 1.0;
    double gan_weight = 0.5;
    long long gan_start_step = 1000;
    std::string gan_loss = "vanilla";  // or "hinge"
    double beta_commit = 0.25;
    long long codebook_reseed_interval = 1000;
    double perceptual_weight = 0.0;
    std::string perceptual_taps = "final";
    double lr = 1e-3;
    double disc_lr = 1e-3;
    int batch_size = 2;

    static CompressionConfig from_config(const RunConfig& rc);
    void validate(const SensorConfig& sensor) const;

    int curve_levels() const;  // log2(f_c)
    int patch_levels() const;  // log2(f_p)
    int latent_height(int image_height) const { return image_height / f_p; }
    int latent_width(int image_width) const { return image_width / (f_c * f_p); }
};

/// Learned range-image constituents: |Z| entries of dimension latent_dim,
/// with usage counters for dead-entry reseeding.
struct Codebook {
    nn::Tensor entries;  // [K, d]
    std::vector<uint64_t> usage;
};

struct QuantizeResult {
    nn::Tensor z_q;             // straight-through: values snapped, gradient passes
    std::vector<int> indices;   // chosen entry per latent cell
    nn::Tensor vq_loss;         // |sg(z)-e|^2 + beta |z-sg(e)|^2 (means)
};

/// Snaps each latent cell to its nearest codebook entry (L2, lowest index on
/// ties) and returns the two-sided vector-quantization loss.
QuantizeResult quantize(const nn::Tensor& z, Codebook& book, double beta_commit);

// Constant tensors derived from one range image, shared by losses.
struct SceneTensors {
    nn::Tensor net_input;  // [2,H,W]: 2v-1 (v=0 at invalid), mask
    nn::Tensor v;          // [1,H,W] target pixel values in [0,1]
    nn::Tensor m;          // [1,H,W] validity in {0,1}
    nn::Tensor p;          // [3,H,W] coordinates, zero at invalid pixels
};
SceneTensors scene_tensors(const RangeImage& img);

/// Curve-wise + patch-wise VQ autoencoder. The encoder downsamples only
/// horizontally through the curve stage (1x4 kernels, circular padding) and
/// both ways through the patch stage; the decoder mirrors it and applies the
/// quantization layer at its entry.
class Autoencoder {
  public:
    Autoencoder(const CompressionConfig& cfg, const SensorConfig& sensor, uint64_t init_seed);

    /// [2,H,W] -> [latent_dim, H/f_p, W/(f_c*f_p)] continuous latent.
    nn::Tensor encode(const nn::Tensor& x) const;

    struct Decoded {
        nn::Tensor v_hat;  // [1,H,W] in [0,1]
        nn::Tensor m_hat;  // [1,H,W] in [0,1]
        QuantizeResult quant;
    };
    /// Quantizes at the decoder entry and reconstructs value and mask grids.
    Decoded decode(const nn::Tensor& z);

    nn::Tensor encode_image(const RangeImage& img) const;
    RangeImage image_from_output(const nn::Tensor& v_hat, const nn::Tensor& m_hat,
                                 double mask_threshold = 0.5) const;

    const CompressionConfig& config() const { return cfg_; }
    const SensorConfig& sensor() const { return sensor_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    Codebook& codebook() { return codebook_; }

    /// Re-seeds entries unused since the previous call from the given latent
    /// cell vectors.
    void reseed_dead_entries(const std::vector<nn::Tensor>& latents, Rng& rng);

  private:
    void check_latent_shape(const nn::Tensor& z) const;

    CompressionConfig cfg_;
    SensorConfig sensor_;
    nn::ParamStore store_;
    Codebook codebook_;

    struct Level {
        std::vector<nn::ResBlock> blocks;
        nn::Conv2d resample;
    };
    nn::Conv2d enc_in_, enc_out_, dec_in_, dec_out_;
    std::vector<Level> enc_curve_, enc_patch_, dec_patch_, dec_curve_;
    std::vector<nn::ResBlock> enc_mid_, dec_mid_;
    nn::GroupNorm enc_norm_, dec_norm_;
};

/// PatchGAN-style discriminator whose first stage is curve-wise (1x4 kernel,
/// horizontal stride, circular padding). Consumes [x, p, m] as 5 channels and
/// emits a patch logit map.
class Discriminator {
  public:
    Discriminator(int base_channels, uint64_t init_seed);

    nn::Tensor logits(const nn::Tensor& x5) const;  // [5,H,W] -> [1,H/sy,W/sx]
    int stride_y_product() const { return 4; }
    int stride_x_product() const { return 8; }

    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

  private:
    nn::ParamStore store_;
    nn::Conv2d c0_, c1_, c2_, head_;
    nn::GroupNorm n1_, n2_;
};

/// L1 on pixel values + lambda1 * squared coordinate error over valid pixels
/// + lambda2 * squared mask error. All terms are per-pixel means.
nn::Tensor reconstruction_loss(const nn::Tensor& x, const nn::Tensor& x_hat,
                               const nn::Tensor& p, const nn::Tensor& p_hat,
                               const nn::Tensor& m, const nn::Tensor& m_hat, double lambda1,
                               double lambda2);

struct AdvLosses {
    nn::Tensor d_loss;
    nn::Tensor g_loss;
};

/// Non-saturating (or hinge) GAN losses over the discriminator's patch
/// logits. The fake triple is detached inside the d_loss path, so d_loss
/// trains the discriminator only and g_loss the generator only.
AdvLosses adversarial_losses(const Discriminator& disc, const SceneTensors& real,
                             const nn::Tensor& x_hat, const nn::Tensor& p_hat,
                             const nn::Tensor& m_hat, double max_range,
                             const std::string& form);

enum class PerceptualTaps { encoder, decoder, all, final };
PerceptualTaps parse_taps(const std::string& name);

/// Mean squared feature-matching error between the extractor activations of
/// two (v, mask) inputs, summed over the selected taps.
nn::Tensor perceptual_loss(const ToyRangeExtractor& extractor, const nn::Tensor& input_x,
                           const nn::Tensor& input_x_hat, PerceptualTaps taps);

struct AeTrainOptions {
    long long steps = 2000;
    uint64_t seed = 0;
    std::filesystem::path checkpoint_path;
    std::filesystem::path csv_path;
    std::optional<std::filesystem::path> resume_from;
    bool quiet = true;
};

struct AeTrainResult {
    uint64_t final_step = 0;
    double final_loss = 0.0;
    double final_l1 = 0.0;
};

/// Full training loop: reconstruction + VQ (+ GAN after warm-up, + optional
/// perceptual term), Adam updates, per-step CSV, periodic codebook reseeds,
/// NaN divergence detection, deterministic resume.
AeTrainResult train_autoencoder(const std::vector<RangeImage>& dataset,
                                const CompressionConfig& cfg, const SensorConfig& sensor,
                                const AeTrainOptions& opts);

/// Rebuilds an autoencoder (and optionally its discriminator) from a
/// checkpoint produced by train_autoencoder.
Autoencoder autoencoder_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix = "");
SensorConfig sensor_from_checkpoint(const Checkpoint& ckpt);
CompressionConfig compression_from_checkpoint(const Checkpoint& ckpt);

}  // namespace rangegen
