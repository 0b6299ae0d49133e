#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rangegen/checkpoint.hpp"
#include "rangegen/config.hpp"
#include "rangegen/nn/modules.hpp"

namespace rangegen {

struct DiffusionConfig {
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::string sampler = "ddim";
    int ddim_steps = 50;
    double ddim_eta = 0.0;
    std::string condition_mode = "none";  // concat_image | cross_attention_tokens
    int cond_classes = 4;
    int token_dim = 16;
    int base_channels = 64;
    std::vector<int> channel_mults = {1, 2, 4};
    double lr = 1e-3;
    int batch_size = 4;

    static DiffusionConfig from_config(const RunConfig& rc);
    void validate() const;
};

/// Linear beta schedule with cumulative products; index 0 is the clean-data
/// convention (alpha_bar[0] == 1), betas live at 1..T.
struct Schedule {
    std::vector<double> beta;       // [T+1], beta[0] unused
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // alpha_bar[t] = prod_{s<=t} alpha[s]
    int timesteps = 0;
};

Schedule make_schedule(const DiffusionConfig& cfg);

/// Forward process draw: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
nn::Tensor q_sample(const nn::Tensor& z0, int t, const nn::Tensor& eps, const Schedule& s);

/// Either a latent-resolution condition map (concat mode) or a token
/// sequence (cross-attention mode). Default-constructed means unconditional.
struct ConditionInput {
    std::optional<nn::Tensor> image_map;  // [k,h,w]
    std::optional<nn::Tensor> tokens;     // [n,token_dim]

    bool empty() const { return !image_map && !tokens; }
};

/// Epsilon-prediction UNet over latent grids with sinusoidal timestep
/// conditioning, self-attention at the coarsest resolution and optional
/// cross-attention / input-concat condition pathways.
class DenoiserUNet {
  public:
    DenoiserUNet(const DiffusionConfig& cfg, int latent_channels, uint64_t init_seed);

    nn::Tensor predict(const nn::Tensor& z_t, int t, const ConditionInput& ctx = {}) const;

    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    const DiffusionConfig& config() const { return cfg_; }
    int latent_channels() const { return latent_channels_; }

  private:
    DiffusionConfig cfg_;
    int latent_channels_ = 0;
    int levels_ = 0;
    nn::ParamStore store_;
    nn::Linear time_in_, time_out_;
    nn::Conv2d conv_in_, conv_out_;
    nn::GroupNorm norm_out_;
    std::vector<nn::ResBlock> down_blocks_, up_blocks_;
    std::vector<nn::Conv2d> downsamples_, upsamples_;
    nn::ResBlock mid1_, mid2_;
    nn::SelfAttention2d mid_attn_;
    nn::CrossAttention2d mid_cross_;
};

/// |eps - eps_theta(z_t, t, ctx)|^2 (mean over cells).
nn::Tensor training_loss(const DenoiserUNet& unet, const Schedule& s, const nn::Tensor& z0,
                         int t, const nn::Tensor& eps, const ConditionInput& ctx = {});

/// Deterministic-skip sampler; eta = 0 is a pure function of (params, seed,
/// ctx), eta = 1 with steps = T matches the ancestral sampler in law.
std::vector<nn::Tensor> sample_ddim(const DenoiserUNet& unet, const Schedule& s, int n,
                                    int steps, double eta, const ConditionInput& ctx,
                                    uint64_t seed, const nn::Shape& latent_shape);

/// Full-length ancestral sampler with posterior-variance noise injection.
std::vector<nn::Tensor> sample_ddpm(const DenoiserUNet& unet, const Schedule& s, int n,
                                    const ConditionInput& ctx, uint64_t seed,
                                    const nn::Shape& latent_shape);

/// One-hot embeds a class-id map at sensor resolution and average-pools it
/// with the autoencoder's (f_c, f_p) geometry down to latent resolution.
nn::Tensor encode_condition_map(const std::vector<int>& class_map, int height, int width,
                                int vocab, int f_c, int f_p);

/// Maps per-view embedding vectors through a provider into a token sequence.
class EmbeddingProvider {
  public:
    virtual ~EmbeddingProvider() = default;
    virtual std::vector<double> embed(const std::vector<double>& view) const = 0;
};

class IdentityEmbedding : public EmbeddingProvider {
  public:
    std::vector<double> embed(const std::vector<double>& view) const override { return view; }
};

/// One token per view, order preserved; all views must share one dimension.
nn::Tensor embed_views(const std::vector<std::vector<double>>& views,
                       const EmbeddingProvider& provider = IdentityEmbedding());

struct DmTrainOptions {
    long long steps = 2000;
    uint64_t seed = 0;
    std::filesystem::path checkpoint_path;
    std::filesystem::path csv_path;
    std::optional<std::filesystem::path> resume_from;
    bool quiet = true;
};

struct DmTrainResult {
    uint64_t final_step = 0;
    double final_loss = 0.0;
    double latent_std = 1.0;
};

/// Trains the denoiser on frozen-encoder latents (standardized by a scalar
/// dataset std). The saved checkpoint embeds the autoencoder arrays under
/// "ae/" so sampling is self-contained.
DmTrainResult train_diffusion(const std::vector<nn::Tensor>& latents,
                              const DiffusionConfig& cfg, const Checkpoint& ae_ckpt,
                              const DmTrainOptions& opts);

DiffusionConfig diffusion_from_checkpoint(const Checkpoint& ckpt);

}  // namespace rangegen
