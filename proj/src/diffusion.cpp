#include "rangegen/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "rangegen/errors.hpp"

namespace rangegen {

namespace {

// Full-precision decimal form so config strings restore doubles exactly.
std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

DiffusionConfig DiffusionConfig::from_config(const RunConfig& rc) {
    DiffusionConfig cfg;
    cfg.timesteps = rc.get_int("dm.timesteps");
    cfg.beta_start = rc.get_double("dm.beta_start");
    cfg.beta_end = rc.get_double("dm.beta_end");
    cfg.sampler = rc.get("dm.sampler");
    cfg.ddim_steps = rc.get_int("dm.ddim_steps");
    cfg.ddim_eta = rc.get_double("dm.ddim_eta");
    cfg.condition_mode = rc.get("dm.condition_mode");
    cfg.cond_classes = rc.get_int("dm.cond_classes");
    cfg.token_dim = rc.get_int("dm.token_dim");
    cfg.base_channels = rc.get_int("dm.base_channels");
    cfg.channel_mults = rc.get_int_list("dm.channel_mults");
    cfg.lr = rc.get_double("dm.lr");
    cfg.batch_size = rc.get_int("dm.batch_size");
    cfg.validate();
    return cfg;
}

void DiffusionConfig::validate() const {
    if (timesteps < 1) throw ConfigError("diffusion: timesteps must be >= 1");
    if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
        throw ConfigError("diffusion: need 0 < beta_start < beta_end < 1");
    if (ddim_steps < 1 || ddim_steps > timesteps)
        throw ConfigError("diffusion: need 1 <= ddim_steps <= timesteps");
    if (sampler != "ddpm" && sampler != "ddim")
        throw ConfigError("diffusion: sampler must be ddpm or ddim");
    if (condition_mode != "none" && condition_mode != "concat_image" &&
        condition_mode != "cross_attention_tokens")
        throw ConfigError("diffusion: unknown condition_mode " + condition_mode);
    if (channel_mults.empty()) throw ConfigError("diffusion: empty channel_mults");
}

Schedule make_schedule(const DiffusionConfig& cfg) {
    cfg.validate();
    Schedule s;
    s.timesteps = cfg.timesteps;
    const int T = cfg.timesteps;
    s.beta.assign(T + 1, 0.0);
    s.alpha.assign(T + 1, 1.0);
    s.alpha_bar.assign(T + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        s.beta[t] = T == 1 ? cfg.beta_start
                           : cfg.beta_start + (cfg.beta_end - cfg.beta_start) *
                                                  static_cast<double>(t - 1) / (T - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    }
    return s;
}

nn::Tensor q_sample(const nn::Tensor& z0, int t, const nn::Tensor& eps, const Schedule& s) {
    if (t < 1 || t > s.timesteps) throw std::invalid_argument("q_sample: t outside 1..T");
    if (z0.shape() != eps.shape()) throw std::invalid_argument("q_sample: shape mismatch");
    const double a = std::sqrt(s.alpha_bar[t]);
    const double b = std::sqrt(1.0 - s.alpha_bar[t]);
    return nn::add(nn::scale(z0, a), nn::scale(eps, b));
}

// ---- UNet ----

DenoiserUNet::DenoiserUNet(const DiffusionConfig& cfg, int latent_channels, uint64_t init_seed)
    : cfg_(cfg), latent_channels_(latent_channels) {
    cfg_.validate();
    Rng rng(init_seed);
    levels_ = static_cast<int>(cfg_.channel_mults.size());
    const int base = cfg_.base_channels;
    const int time_dim = base * 4;

    time_in_ = nn::Linear(store_, "time.in", base, time_dim, rng);
    time_out_ = nn::Linear(store_, "time.out", time_dim, time_dim, rng);

    int in_ch = latent_channels;
    if (cfg_.condition_mode == "concat_image") in_ch += cfg_.cond_classes;
    const auto ch = [&](int level) { return base * cfg_.channel_mults[level]; };

    conv_in_ = nn::Conv2d(store_, "in", in_ch, ch(0), 3, 3, 1, 1, rng);
    for (int i = 0; i < levels_; ++i) {
        down_blocks_.emplace_back(store_, "down" + std::to_string(i), i == 0 ? ch(0) : ch(i - 1),
                                  ch(i), 3, 3, rng, time_dim);
        if (i < levels_ - 1)
            downsamples_.emplace_back(store_, "down" + std::to_string(i) + ".pool", ch(i),
                                      ch(i), 4, 4, 2, 2, rng);
    }
    const int top = ch(levels_ - 1);
    mid1_ = nn::ResBlock(store_, "mid1", top, top, 3, 3, rng, time_dim);
    mid_attn_ = nn::SelfAttention2d(store_, "mid.attn", top, rng);
    if (cfg_.condition_mode == "cross_attention_tokens")
        mid_cross_ = nn::CrossAttention2d(store_, "mid.cross", top, cfg_.token_dim, rng);
    mid2_ = nn::ResBlock(store_, "mid2", top, top, 3, 3, rng, time_dim);

    for (int i = levels_ - 1; i >= 0; --i) {
        up_blocks_.emplace_back(store_, "up" + std::to_string(i), 2 * ch(i),
                                i == 0 ? ch(0) : ch(i - 1), 3, 3, rng, time_dim);
        if (i > 0)
            upsamples_.emplace_back(store_, "up" + std::to_string(i) + ".conv", ch(i - 1),
                                    ch(i - 1), 3, 3, 1, 1, rng);
    }
    norm_out_ = nn::GroupNorm(store_, "out.norm", ch(0), rng);
    conv_out_ = nn::Conv2d(store_, "out", ch(0), latent_channels, 3, 3, 1, 1, rng);
    std::fill(conv_out_.weight.data(), conv_out_.weight.data() + conv_out_.weight.numel(),
              0.0);
    std::fill(conv_out_.bias.data(), conv_out_.bias.data() + conv_out_.bias.numel(), 0.0);
}

nn::Tensor DenoiserUNet::predict(const nn::Tensor& z_t, int t, const ConditionInput& ctx) const {
    if (z_t.ndim() != 3 || z_t.dim(0) != latent_channels_)
        throw ConfigError("predict: latent channel mismatch");
    const int down_factor = 1 << (levels_ - 1);
    if (z_t.dim(1) % down_factor != 0 || z_t.dim(2) % down_factor != 0)
        throw ConfigError("predict: latent spatial dims must be divisible by " +
                          std::to_string(down_factor));

    nn::Tensor x = z_t;
    if (cfg_.condition_mode == "concat_image") {
        nn::Tensor cond_map;
        if (ctx.image_map) {
            if (ctx.image_map->dim(0) != cfg_.cond_classes ||
                ctx.image_map->dim(1) != z_t.dim(1) || ctx.image_map->dim(2) != z_t.dim(2))
                throw ConfigError("predict: condition map shape mismatch");
            cond_map = *ctx.image_map;
        } else {
            // Null element of the concat pathway: the all-zero map.
            cond_map = nn::Tensor::zeros({cfg_.cond_classes, z_t.dim(1), z_t.dim(2)});
        }
        x = nn::concat_channels({x, cond_map});
        if (ctx.tokens)
            throw ConfigError("predict: token condition passed to an image-conditioned model");
    } else if (cfg_.condition_mode == "cross_attention_tokens" && ctx.image_map) {
        throw ConfigError("predict: image condition passed to a token-conditioned model");
    }
    // condition_mode == "none" ignores any supplied context.

    nn::Tensor temb = time_out_.forward(nn::silu(time_in_.forward(
        nn::timestep_features(t, cfg_.base_channels))));

    nn::Tensor h = conv_in_.forward(x);
    std::vector<nn::Tensor> skips;
    for (int i = 0; i < levels_; ++i) {
        h = down_blocks_[i].forward(h, temb);
        skips.push_back(h);
        if (i < levels_ - 1) h = downsamples_[i].forward(h);
    }
    h = mid1_.forward(h, temb);
    h = mid_attn_.forward(h);
    if (cfg_.condition_mode == "cross_attention_tokens" && ctx.tokens)
        h = mid_cross_.forward(h, *ctx.tokens);
    h = mid2_.forward(h, temb);

    for (int j = 0; j < levels_; ++j) {
        const int i = levels_ - 1 - j;
        h = up_blocks_[j].forward(nn::concat_channels({h, skips[i]}), temb);
        if (i > 0) h = upsamples_[j].forward(nn::upsample_nearest(h, 2, 2));
    }
    return conv_out_.forward(nn::silu(norm_out_.forward(h)));
}

nn::Tensor training_loss(const DenoiserUNet& unet, const Schedule& s, const nn::Tensor& z0,
                         int t, const nn::Tensor& eps, const ConditionInput& ctx) {
    nn::Tensor z_t = q_sample(z0, t, eps, s);
    nn::Tensor pred = unet.predict(z_t, t, ctx);
    nn::Tensor diff = nn::sub(pred, eps);
    return nn::mean(nn::mul(diff, diff));
}

// ---- samplers ----

namespace {

nn::Tensor gaussian_latent(const nn::Shape& shape, Rng& rng) {
    nn::Tensor z = nn::Tensor::zeros(shape);
    for (int64_t i = 0; i < z.numel(); ++i) z.data()[i] = rng.normal();
    return z;
}

}  // namespace

std::vector<nn::Tensor> sample_ddim(const DenoiserUNet& unet, const Schedule& s, int n,
                                    int steps, double eta, const ConditionInput& ctx,
                                    uint64_t seed, const nn::Shape& latent_shape) {
    if (steps < 1 || steps > s.timesteps)
        throw std::invalid_argument("sample_ddim: need 1 <= steps <= T");
    nn::NoGradGuard no_grad;
    const int T = s.timesteps;

    // Ascending sub-sequence tau_1..tau_steps with tau_steps == T; tau_0 := 0
    // maps to the clean-data point alpha_bar = 1.
    std::vector<int> tau(steps + 1, 0);
    for (int k = 1; k <= steps; ++k)
        tau[k] = static_cast<int>(std::llround(static_cast<double>(k) * T / steps));

    std::vector<nn::Tensor> out;
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::substream(seed, static_cast<uint64_t>(i));
        nn::Tensor z = gaussian_latent(latent_shape, rng);
        for (int k = steps; k >= 1; --k) {
            const int t = tau[k];
            const int t_prev = tau[k - 1];
            const double ab_t = s.alpha_bar[t];
            const double ab_prev = s.alpha_bar[t_prev];
            nn::Tensor eps_hat = unet.predict(z, t, ctx);

            const double sigma =
                eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) *
                std::sqrt(std::max(0.0, 1.0 - ab_t / ab_prev));
            const double dir_coef = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
            const double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
            const double c0 = std::sqrt(ab_prev) * inv_sqrt_ab;
            const double c1 = dir_coef - std::sqrt(ab_prev) * inv_sqrt_ab *
                                             std::sqrt(1.0 - ab_t);
            for (int64_t j = 0; j < z.numel(); ++j) {
                double value = c0 * z.data()[j] + c1 * eps_hat.data()[j];
                if (sigma > 0.0) value += sigma * rng.normal();
                z.data()[j] = value;
            }
        }
        out.push_back(z);
    }
    return out;
}

std::vector<nn::Tensor> sample_ddpm(const DenoiserUNet& unet, const Schedule& s, int n,
                                    const ConditionInput& ctx, uint64_t seed,
                                    const nn::Shape& latent_shape) {
    nn::NoGradGuard no_grad;
    std::vector<nn::Tensor> out;
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::substream(seed, static_cast<uint64_t>(i));
        nn::Tensor z = gaussian_latent(latent_shape, rng);
        for (int t = s.timesteps; t >= 1; --t) {
            nn::Tensor eps_hat = unet.predict(z, t, ctx);
            const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[t]);
            const double eps_coef = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
            const double post_var =
                t > 1 ? (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t] : 0.0;
            const double sigma = std::sqrt(post_var);
            for (int64_t j = 0; j < z.numel(); ++j) {
                double value = inv_sqrt_alpha * (z.data()[j] - eps_coef * eps_hat.data()[j]);
                if (t > 1) value += sigma * rng.normal();
                z.data()[j] = value;
            }
        }
        out.push_back(z);
    }
    return out;
}

// ---- conditioning ----

nn::Tensor encode_condition_map(const std::vector<int>& class_map, int height, int width,
                                int vocab, int f_c, int f_p) {
    if (static_cast<int64_t>(class_map.size()) != static_cast<int64_t>(height) * width)
        throw DataError("encode_condition_map: map size mismatch");
    const int64_t plane = static_cast<int64_t>(height) * width;
    std::vector<double> onehot(static_cast<int64_t>(vocab) * plane, 0.0);
    for (int64_t i = 0; i < plane; ++i) {
        const int id = class_map[i];
        if (id < 0 || id >= vocab)
            throw DataError("encode_condition_map: class id outside the vocabulary");
        onehot[static_cast<int64_t>(id) * plane + i] = 1.0;
    }
    nn::Tensor grid = nn::Tensor::from_data({vocab, height, width}, std::move(onehot));
    // Same downsampling geometry as the autoencoder: f_p rows, f_c*f_p columns.
    return nn::avg_pool(grid, f_p, f_c * f_p);
}

nn::Tensor embed_views(const std::vector<std::vector<double>>& views,
                       const EmbeddingProvider& provider) {
    if (views.empty()) throw DataError("embed_views: need at least one view");
    std::vector<std::vector<double>> tokens;
    tokens.reserve(views.size());
    for (const auto& view : views) tokens.push_back(provider.embed(view));
    const size_t dim = tokens.front().size();
    for (const auto& token : tokens)
        if (token.size() != dim) throw DataError("embed_views: embedding dimensions differ");
    std::vector<double> flat;
    flat.reserve(tokens.size() * dim);
    for (const auto& token : tokens) flat.insert(flat.end(), token.begin(), token.end());
    return nn::Tensor::from_data({static_cast<int>(tokens.size()), static_cast<int>(dim)},
                                 std::move(flat));
}

// ---- training ----

DmTrainResult train_diffusion(const std::vector<nn::Tensor>& latents,
                              const DiffusionConfig& cfg, const Checkpoint& ae_ckpt,
                              const DmTrainOptions& opts) {
    if (latents.empty()) throw InsufficientDataError("train_diffusion: no latents");
    const int d = latents.front().dim(0);
    const Schedule schedule = make_schedule(cfg);

    DenoiserUNet unet(cfg, d, opts.seed + 17);
    nn::Adam opt;
    opt.lr = cfg.lr;
    Rng rng(opts.seed ^ 0xd1f0a5eULL);
    uint64_t start_step = 0;

    // Scalar standardization estimated once from the dataset.
    double latent_std = 0.0;
    {
        double acc = 0.0;
        int64_t count = 0;
        for (const nn::Tensor& z : latents) {
            for (int64_t i = 0; i < z.numel(); ++i) acc += z.data()[i] * z.data()[i];
            count += z.numel();
        }
        latent_std = std::sqrt(std::max(acc / static_cast<double>(count), 1e-12));
        latent_std = static_cast<double>(static_cast<float>(latent_std));
    }

    if (opts.resume_from) {
        const Checkpoint ckpt = load_checkpoint(*opts.resume_from);
        if (ckpt.config.count("kind") == 0 || ckpt.config.at("kind") != "diffusion")
            throw CheckpointMismatchError("resume: checkpoint is not a diffusion model");
        ckpt.restore_params(unet.params());
        ckpt.restore_adam(opt, unet.params(), "opt_dm.");
        rng.set_state(ckpt.rng_state);
        start_step = ckpt.step;
        latent_std = std::stod(ckpt.config.at("dm.latent_std"));
    }

    std::vector<nn::Tensor> z0s;
    z0s.reserve(latents.size());
    for (const nn::Tensor& z : latents) {
        nn::Tensor copy = nn::Tensor::zeros(z.shape());
        for (int64_t i = 0; i < z.numel(); ++i) copy.data()[i] = z.data()[i] / latent_std;
        z0s.push_back(copy);
    }

    std::ofstream csv;
    if (!opts.csv_path.empty()) {
        csv.open(opts.csv_path, start_step == 0 ? std::ios::trunc : std::ios::app);
        if (!csv) throw IoError("cannot open loss csv: " + opts.csv_path.string());
        if (start_step == 0) csv << "step,loss\n";
    }

    DmTrainResult result;
    result.final_step = start_step;
    result.latent_std = latent_std;

    for (uint64_t step = start_step + 1; step <= static_cast<uint64_t>(opts.steps); ++step) {
        opt.zero_grad(unet.params().tensors());
        nn::Tensor loss = nn::Tensor::scalar(0.0);
        for (int b = 0; b < cfg.batch_size; ++b) {
            const nn::Tensor& z0 = z0s[rng.below(z0s.size())];
            const int t = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.timesteps)));
            nn::Tensor eps = nn::Tensor::zeros(z0.shape());
            for (int64_t i = 0; i < eps.numel(); ++i) eps.data()[i] = rng.normal();
            loss = nn::add(loss, training_loss(unet, schedule, z0, t, eps));
        }
        loss = nn::scale(loss, 1.0 / cfg.batch_size);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            if (!opts.checkpoint_path.empty()) {
                std::ofstream dump(opts.checkpoint_path.string() + ".divergence.txt");
                dump << "step = " << step << "\nloss = " << loss_value << "\n";
            }
            throw DivergenceError("train_diffusion: non-finite loss at step " +
                                  std::to_string(step));
        }
        nn::backward(loss);
        opt.step(unet.params().tensors());

        if (csv.is_open()) csv << step << ',' << loss_value << '\n';
        if (!opts.quiet && step % 100 == 0)
            std::cerr << "dm step " << step << " loss " << loss_value << "\n";
        result.final_step = step;
        result.final_loss = loss_value;
    }

    if (!opts.checkpoint_path.empty()) {
        Checkpoint ckpt;
        ckpt.config = ae_ckpt.config;  // carries sensor + compression blocks
        ckpt.config["kind"] = "diffusion";
        ckpt.config["dm.seed"] = std::to_string(opts.seed);
        ckpt.config["dm.timesteps"] = std::to_string(cfg.timesteps);
        ckpt.config["dm.beta_start"] = fmt_double(cfg.beta_start);
        ckpt.config["dm.beta_end"] = fmt_double(cfg.beta_end);
        ckpt.config["dm.condition_mode"] = cfg.condition_mode;
        ckpt.config["dm.cond_classes"] = std::to_string(cfg.cond_classes);
        ckpt.config["dm.token_dim"] = std::to_string(cfg.token_dim);
        ckpt.config["dm.base_channels"] = std::to_string(cfg.base_channels);
        {
            std::string mults;
            for (size_t i = 0; i < cfg.channel_mults.size(); ++i)
                mults += (i ? "," : "") + std::to_string(cfg.channel_mults[i]);
            ckpt.config["dm.channel_mults"] = mults;
        }
        ckpt.config["dm.latent_std"] = fmt_double(latent_std);
        ckpt.add_params(unet.params());
        ckpt.add_adam(opt, unet.params(), "opt_dm.");
        // Embed the frozen autoencoder so sampling needs one file only.
        for (const auto& [name, t] : ae_ckpt.arrays) {
            if (name.rfind("disc/", 0) == 0 || name.rfind("opt_", 0) == 0) continue;
            ckpt.add_array("ae/" + name, t);
        }
        ckpt.rng_state = rng.state();
        ckpt.step = result.final_step;
        save_checkpoint(ckpt, opts.checkpoint_path);
    }
    return result;
}

DiffusionConfig diffusion_from_checkpoint(const Checkpoint& ckpt) {
    const auto get = [&](const std::string& key) {
        const auto it = ckpt.config.find(key);
        if (it == ckpt.config.end())
            throw CheckpointMismatchError("checkpoint missing config key: " + key);
        return it->second;
    };
    DiffusionConfig cfg;
    cfg.timesteps = std::stoi(get("dm.timesteps"));
    cfg.ddim_steps = std::min(cfg.ddim_steps, cfg.timesteps);
    cfg.beta_start = std::stod(get("dm.beta_start"));
    cfg.beta_end = std::stod(get("dm.beta_end"));
    cfg.condition_mode = get("dm.condition_mode");
    cfg.cond_classes = std::stoi(get("dm.cond_classes"));
    cfg.token_dim = std::stoi(get("dm.token_dim"));
    cfg.base_channels = std::stoi(get("dm.base_channels"));
    cfg.channel_mults.clear();
    std::string mults = get("dm.channel_mults");
    size_t pos = 0;
    while (pos < mults.size()) {
        size_t comma = mults.find(',', pos);
        if (comma == std::string::npos) comma = mults.size();
        cfg.channel_mults.push_back(std::stoi(mults.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return cfg;
}

}  // namespace rangegen
