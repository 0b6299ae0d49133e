#pragma once

#include <map>
#include <string>
#include <vector>

#include "rangegen/nn/tensor.hpp"
#include "rangegen/rng.hpp"

namespace rangegen::nn {

/// Rounds every element to the nearest f32 value. Parameters and optimizer
/// moments live on the f32 grid so that f32 checkpoints round-trip exactly
/// and resumed training replays the uninterrupted trajectory bit for bit.
void quantize_f32(Tensor& t);

/// Named, ordered collection of trainable parameters.
class ParamStore {
  public:
    Tensor create(const std::string& name, const Shape& shape, double init_std, Rng& rng);
    Tensor create_const(const std::string& name, const Shape& shape, double fill);

    bool has(const std::string& name) const;
    Tensor get(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::vector<Tensor> tensors() const;
    int64_t parameter_count() const;

  private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, size_t> index_;
};

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;

    void step(const std::vector<Tensor>& params);
    void zero_grad(const std::vector<Tensor>& params);

    // Moment vectors keyed by parameter order; serialized with checkpoints.
    std::vector<std::vector<double>> m, v;
};

// ---- layers ----
// Every layer binds its parameters into a ParamStore under `prefix` at
// construction, so checkpoints address them by stable names.

struct Conv2d {
    Conv2d() = default;
    Conv2d(ParamStore& store, const std::string& prefix, int in_c, int out_c, int kh, int kw,
           int stride_y, int stride_x, Rng& rng);
    Tensor forward(const Tensor& x) const;

    Tensor weight, bias;
    int stride_y = 1, stride_x = 1;
};

struct Linear {
    Linear() = default;
    Linear(ParamStore& store, const std::string& prefix, int in_dim, int out_dim, Rng& rng);
    Tensor forward(const Tensor& rows) const;  // [n,in] -> [n,out]

    Tensor weight, bias;  // weight [out,in]
};

struct GroupNorm {
    GroupNorm() = default;
    GroupNorm(ParamStore& store, const std::string& prefix, int channels, Rng& rng);
    Tensor forward(const Tensor& x) const;

    Tensor gamma, beta;
    int groups = 8;
};

/// Norm -> SiLU -> conv -> (optional time embedding) -> norm -> SiLU -> conv,
/// with a 1x1 skip projection when channel counts differ. kernel (kh, kw)
/// selects curve-wise (1x4) or patch-wise (3x3) behavior.
struct ResBlock {
    ResBlock() = default;
    ResBlock(ParamStore& store, const std::string& prefix, int in_c, int out_c, int kh, int kw,
             Rng& rng, int time_dim = 0);
    Tensor forward(const Tensor& x, const Tensor& time_emb = {}) const;

    GroupNorm norm1, norm2;
    Conv2d conv1, conv2, skip;
    Linear time_proj;
    bool has_skip = false;
    bool has_time = false;
};

/// Pre-norm single-head self-attention over all spatial positions, with a
/// residual connection. Permutation-equivariant in positions, hence
/// equivariant to horizontal rolls.
struct SelfAttention2d {
    SelfAttention2d() = default;
    SelfAttention2d(ParamStore& store, const std::string& prefix, int channels, Rng& rng);
    Tensor forward(const Tensor& x) const;

    GroupNorm norm;
    Linear to_q, to_k, to_v, to_out;
    int channels = 0;
};

/// Pre-norm single-head cross-attention from spatial positions into a token
/// sequence. An empty token list skips the block (residual passthrough),
/// which is the null element of the conditioning pathway.
struct CrossAttention2d {
    CrossAttention2d() = default;
    CrossAttention2d(ParamStore& store, const std::string& prefix, int channels, int token_dim,
                     Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& tokens) const;  // tokens [n,token_dim]

    GroupNorm norm;
    Linear to_q, to_k, to_v, to_out;
    int channels = 0;
};

/// Sinusoidal timestep features of dimension `dim` (even).
Tensor timestep_features(int t, int dim);

}  // namespace rangegen::nn
