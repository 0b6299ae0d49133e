#include "rangegen/compression.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "rangegen/errors.hpp"

namespace rangegen {

namespace {

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

int log2i(int v) {
    int l = 0;
    while ((1 << l) < v) ++l;
    return l;
}

// Patch-stage channel multiplier: 2, 4, 4, ... capped at 4x base.
int patch_mult(int level) { return std::min(4, 2 << level); }

}  // namespace

CompressionConfig CompressionConfig::from_config(const RunConfig& rc) {
    CompressionConfig cfg;
    cfg.f_c = rc.get_int("ae.f_c");
    cfg.f_p = rc.get_int("ae.f_p");
    cfg.latent_dim = rc.get_int("ae.latent_dim");
    cfg.codebook_size = rc.get_int("ae.codebook_size");
    cfg.base_channels = rc.get_int("ae.base_channels");
    cfg.num_res_blocks = rc.get_int("ae.num_res_blocks");
    cfg.lambda_coord = rc.get_double("ae.lambda_coord");
    cfg.lambda_mask = rc.get_double("ae.lambda_mask");
    cfg.gan_weight = rc.get_double("ae.gan_weight");
    cfg.gan_start_step = rc.get_i64("ae.gan_start_step");
    cfg.gan_loss = rc.get("ae.gan_loss");
    cfg.beta_commit = rc.get_double("ae.beta_commit");
    cfg.codebook_reseed_interval = rc.get_i64("ae.codebook_reseed_interval");
    cfg.perceptual_weight = rc.get_double("ae.perceptual_weight");
    cfg.perceptual_taps = rc.get("ae.perceptual_taps");
    cfg.lr = rc.get_double("ae.lr");
    cfg.disc_lr = rc.get_double("ae.disc_lr");
    cfg.batch_size = rc.get_int("ae.batch_size");
    return cfg;
}

void CompressionConfig::validate(const SensorConfig& sensor) const {
    if (!is_power_of_two(f_c) || !is_power_of_two(f_p))
        throw ConfigError("compression: f_c and f_p must be powers of two");
    if (sensor.width % (f_c * f_p) != 0)
        throw ConfigError("compression: W must be divisible by f_c * f_p");
    if (sensor.height % f_p != 0)
        throw ConfigError("compression: H must be divisible by f_p");
    if (latent_dim < 1 || codebook_size < 1 || base_channels < 4 || num_res_blocks < 1)
        throw ConfigError("compression: degenerate architecture parameters");
    if (gan_loss != "vanilla" && gan_loss != "hinge")
        throw ConfigError("compression: gan_loss must be vanilla or hinge");
    parse_taps(perceptual_taps);
}

int CompressionConfig::curve_levels() const { return log2i(f_c); }
int CompressionConfig::patch_levels() const { return log2i(f_p); }

// ---- quantization ----

QuantizeResult quantize(const nn::Tensor& z, Codebook& book, double beta_commit) {
    if (!book.entries.defined() || book.entries.dim(0) == 0)
        throw ConfigError("quantize: empty codebook");
    if (z.ndim() != 3 || book.entries.dim(1) != z.dim(0))
        throw ConfigError("quantize: latent dimension does not match codebook");
    const int dim = z.dim(0), height = z.dim(1), width = z.dim(2);
    const int entries = book.entries.dim(0);
    const int64_t cells = static_cast<int64_t>(height) * width;

    nn::Tensor rows = nn::image_to_rows(z);  // [N,d]

    // Nearest entries by squared L2; ties break to the lowest index.
    std::vector<int> indices(cells);
    {
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
            zm(rows.data(), cells, dim);
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
            em(book.entries.data(), entries, dim);
        const Eigen::VectorXd e_sq = em.rowwise().squaredNorm();
        // Process in chunks to bound the distance-matrix footprint.
        const int64_t chunk = 4096;
        for (int64_t begin = 0; begin < cells; begin += chunk) {
            const int64_t len = std::min(chunk, cells - begin);
            Eigen::MatrixXd dots = zm.middleRows(begin, len) * em.transpose();  // [len,K]
            for (int64_t i = 0; i < len; ++i) {
                int best = 0;
                double best_dist = e_sq[0] - 2.0 * dots(i, 0);
                for (int k = 1; k < entries; ++k) {
                    const double d = e_sq[k] - 2.0 * dots(i, k);
                    if (d < best_dist) {
                        best_dist = d;
                        best = k;
                    }
                }
                indices[begin + i] = best;
            }
        }
    }
    for (int idx : indices) ++book.usage[idx];

    nn::Tensor selected = nn::gather_rows(book.entries, indices);  // [N,d]
    // Straight-through estimator: forward takes the snapped values, gradient
    // passes to the encoder side unchanged.
    nn::Tensor z_q_rows = nn::add(rows, nn::detach(nn::sub(selected, rows)));

    nn::Tensor codebook_term = nn::sub(nn::detach(rows), selected);
    nn::Tensor commit_term = nn::sub(rows, nn::detach(selected));
    nn::Tensor vq_loss = nn::add(nn::mean(nn::mul(codebook_term, codebook_term)),
                                 nn::scale(nn::mean(nn::mul(commit_term, commit_term)),
                                           beta_commit));

    QuantizeResult res;
    res.z_q = nn::rows_to_image(z_q_rows, height, width);
    res.indices = std::move(indices);
    res.vq_loss = vq_loss;
    return res;
}

// ---- scene tensors ----

SceneTensors scene_tensors(const RangeImage& img) {
    const int height = img.cfg.height, width = img.cfg.width;
    const int64_t plane = static_cast<int64_t>(height) * width;
    std::vector<double> input(2 * plane, 0.0);
    std::vector<double> v(plane, 0.0), m(plane, 0.0);
    for (int64_t i = 0; i < plane; ++i) {
        const float d = img.depth[i];
        if (d >= 0.0f) {
            v[i] = encode_depth(d, img.cfg);
            m[i] = 1.0;
            input[i] = 2.0 * v[i] - 1.0;
            input[plane + i] = 1.0;
        } else {
            input[i] = -1.0;
        }
    }
    SceneTensors out;
    out.net_input = nn::Tensor::from_data({2, height, width}, std::move(input));
    out.v = nn::Tensor::from_data({1, height, width}, std::move(v));
    out.m = nn::Tensor::from_data({1, height, width}, std::move(m));
    {
        nn::NoGradGuard no_grad;
        nn::Tensor coords = nn::coord_image(out.v, img.cfg);
        // Zero out coordinates at invalid pixels (v = 0 already maps them to
        // the origin; masking keeps that explicit).
        std::vector<double> mask3(3 * plane);
        for (int axis = 0; axis < 3; ++axis)
            for (int64_t i = 0; i < plane; ++i)
                mask3[axis * plane + i] = out.m.data()[i];
        out.p = nn::mask_mul(coords, mask3);
    }
    return out;
}

// ---- autoencoder ----

Autoencoder::Autoencoder(const CompressionConfig& cfg, const SensorConfig& sensor,
                         uint64_t init_seed)
    : cfg_(cfg), sensor_(sensor) {
    cfg_.validate(sensor_);
    Rng rng(init_seed);
    const int base = cfg_.base_channels;
    const int eta = cfg_.curve_levels();
    const int mu = cfg_.patch_levels();
    const int top = mu > 0 ? base * patch_mult(mu - 1) : base;

    enc_in_ = nn::Conv2d(store_, "enc.in", 2, base, 1, 4, 1, 1, rng);
    for (int l = 0; l < eta; ++l) {
        Level level;
        for (int b = 0; b < cfg_.num_res_blocks; ++b)
            level.blocks.emplace_back(store_, "enc.curve" + std::to_string(l) + ".block" +
                                                  std::to_string(b),
                                      base, base, 1, 4, rng);
        level.resample = nn::Conv2d(store_, "enc.curve" + std::to_string(l) + ".down", base,
                                    base, 1, 4, 1, 2, rng);
        enc_curve_.push_back(std::move(level));
    }
    int ch = base;
    for (int l = 0; l < mu; ++l) {
        Level level;
        const int out_ch = base * patch_mult(l);
        for (int b = 0; b < cfg_.num_res_blocks; ++b) {
            level.blocks.emplace_back(store_, "enc.patch" + std::to_string(l) + ".block" +
                                                  std::to_string(b),
                                      b == 0 ? ch : out_ch, out_ch, 3, 3, rng);
        }
        level.resample = nn::Conv2d(store_, "enc.patch" + std::to_string(l) + ".down", out_ch,
                                    out_ch, 4, 4, 2, 2, rng);
        enc_patch_.push_back(std::move(level));
        ch = out_ch;
    }
    for (int b = 0; b < 2; ++b)
        enc_mid_.emplace_back(store_, "enc.mid" + std::to_string(b), top, top, 3, 3, rng);
    enc_norm_ = nn::GroupNorm(store_, "enc.norm", top, rng);
    enc_out_ = nn::Conv2d(store_, "enc.out", top, cfg_.latent_dim, 3, 3, 1, 1, rng);

    dec_in_ = nn::Conv2d(store_, "dec.in", cfg_.latent_dim, top, 3, 3, 1, 1, rng);
    for (int b = 0; b < 2; ++b)
        dec_mid_.emplace_back(store_, "dec.mid" + std::to_string(b), top, top, 3, 3, rng);
    ch = top;
    for (int l = mu - 1; l >= 0; --l) {
        Level level;
        level.resample = nn::Conv2d(store_, "dec.patch" + std::to_string(l) + ".up", ch, ch, 3,
                                    3, 1, 1, rng);
        const int out_ch = l == 0 ? base : base * patch_mult(l - 1);
        for (int b = 0; b < cfg_.num_res_blocks; ++b)
            level.blocks.emplace_back(store_, "dec.patch" + std::to_string(l) + ".block" +
                                                  std::to_string(b),
                                      b == 0 ? ch : out_ch, out_ch, 3, 3, rng);
        dec_patch_.push_back(std::move(level));
        ch = out_ch;
    }
    for (int l = eta - 1; l >= 0; --l) {
        Level level;
        level.resample = nn::Conv2d(store_, "dec.curve" + std::to_string(l) + ".up", base, base,
                                    1, 4, 1, 1, rng);
        for (int b = 0; b < cfg_.num_res_blocks; ++b)
            level.blocks.emplace_back(store_, "dec.curve" + std::to_string(l) + ".block" +
                                                  std::to_string(b),
                                      base, base, 1, 4, rng);
        dec_curve_.push_back(std::move(level));
    }
    dec_norm_ = nn::GroupNorm(store_, "dec.norm", base, rng);
    dec_out_ = nn::Conv2d(store_, "dec.out", base, 2, 1, 4, 1, 1, rng);

    codebook_.entries =
        store_.create("codebook", {cfg_.codebook_size, cfg_.latent_dim}, 0.5, rng);
    codebook_.usage.assign(cfg_.codebook_size, 0);
}

nn::Tensor Autoencoder::encode(const nn::Tensor& x) const {
    if (x.ndim() != 3 || x.dim(0) != 2 || x.dim(1) != sensor_.height ||
        x.dim(2) != sensor_.width)
        throw ConfigError("encode: input shape does not match the sensor configuration");
    nn::Tensor h = enc_in_.forward(x);
    for (const Level& level : enc_curve_) {
        for (const nn::ResBlock& block : level.blocks) h = block.forward(h);
        h = level.resample.forward(h);
    }
    for (const Level& level : enc_patch_) {
        for (const nn::ResBlock& block : level.blocks) h = block.forward(h);
        h = level.resample.forward(h);
    }
    for (const nn::ResBlock& block : enc_mid_) h = block.forward(h);
    return enc_out_.forward(nn::silu(enc_norm_.forward(h)));
}

void Autoencoder::check_latent_shape(const nn::Tensor& z) const {
    if (z.ndim() != 3 || z.dim(0) != cfg_.latent_dim ||
        z.dim(1) != cfg_.latent_height(sensor_.height) ||
        z.dim(2) != cfg_.latent_width(sensor_.width))
        throw ConfigError("decode: latent shape does not match the configuration");
}

Autoencoder::Decoded Autoencoder::decode(const nn::Tensor& z) {
    check_latent_shape(z);
    Decoded out;
    out.quant = quantize(z, codebook_, cfg_.beta_commit);

    nn::Tensor h = dec_in_.forward(out.quant.z_q);
    for (const nn::ResBlock& block : dec_mid_) h = block.forward(h);
    for (const Level& level : dec_patch_) {
        h = level.resample.forward(nn::upsample_nearest(h, 2, 2));
        for (const nn::ResBlock& block : level.blocks) h = block.forward(h);
    }
    for (const Level& level : dec_curve_) {
        h = level.resample.forward(nn::upsample_nearest(h, 1, 2));
        for (const nn::ResBlock& block : level.blocks) h = block.forward(h);
    }
    nn::Tensor head = dec_out_.forward(nn::silu(dec_norm_.forward(h)));
    out.v_hat = nn::scale(nn::add_scalar(nn::tanh(nn::slice_channels(head, 0, 1)), 1.0), 0.5);
    out.m_hat = nn::sigmoid(nn::slice_channels(head, 1, 2));
    return out;
}

nn::Tensor Autoencoder::encode_image(const RangeImage& img) const {
    return encode(scene_tensors(img).net_input);
}

RangeImage Autoencoder::image_from_output(const nn::Tensor& v_hat, const nn::Tensor& m_hat,
                                          double mask_threshold) const {
    RangeImage img(sensor_);
    const int64_t plane = static_cast<int64_t>(sensor_.height) * sensor_.width;
    for (int64_t i = 0; i < plane; ++i) {
        if (m_hat.data()[i] >= mask_threshold) {
            const double v = std::clamp(v_hat.data()[i], 0.0, 1.0);
            img.depth[i] = static_cast<float>(decode_depth(v, sensor_));
        }
    }
    return img;
}

void Autoencoder::reseed_dead_entries(const std::vector<nn::Tensor>& latents, Rng& rng) {
    if (latents.empty()) return;
    std::vector<const nn::Tensor*> pool;
    for (const nn::Tensor& t : latents) pool.push_back(&t);
    const int dim = cfg_.latent_dim;
    for (int k = 0; k < cfg_.codebook_size; ++k) {
        if (codebook_.usage[k] != 0) continue;
        const nn::Tensor* z = pool[rng.below(pool.size())];
        const int64_t cells = z->numel() / dim;
        const int64_t cell = static_cast<int64_t>(rng.below(cells));
        // Latents are [d,h,w]; copy one cell vector into the dead entry.
        for (int j = 0; j < dim; ++j) {
            const double value = z->data()[j * cells + cell];
            codebook_.entries.data()[static_cast<int64_t>(k) * dim + j] =
                static_cast<double>(static_cast<float>(value));
        }
    }
    std::fill(codebook_.usage.begin(), codebook_.usage.end(), 0);
}

// ---- discriminator ----

Discriminator::Discriminator(int base_channels, uint64_t init_seed) {
    Rng rng(init_seed);
    const int b = base_channels;
    c0_ = nn::Conv2d(store_, "d.c0", 5, b, 1, 4, 1, 2, rng);
    c1_ = nn::Conv2d(store_, "d.c1", b, 2 * b, 4, 4, 2, 2, rng);
    n1_ = nn::GroupNorm(store_, "d.n1", 2 * b, rng);
    c2_ = nn::Conv2d(store_, "d.c2", 2 * b, 4 * b, 4, 4, 2, 2, rng);
    n2_ = nn::GroupNorm(store_, "d.n2", 4 * b, rng);
    head_ = nn::Conv2d(store_, "d.head", 4 * b, 1, 3, 3, 1, 1, rng);
}

nn::Tensor Discriminator::logits(const nn::Tensor& x5) const {
    if (x5.ndim() != 3 || x5.dim(0) != 5)
        throw ConfigError("discriminator: expected 5-channel [x,p,m] input");
    nn::Tensor h = nn::leaky_relu(c0_.forward(x5), 0.2);
    h = nn::leaky_relu(n1_.forward(c1_.forward(h)), 0.2);
    h = nn::leaky_relu(n2_.forward(c2_.forward(h)), 0.2);
    return head_.forward(h);
}

// ---- losses ----

nn::Tensor reconstruction_loss(const nn::Tensor& x, const nn::Tensor& x_hat,
                               const nn::Tensor& p, const nn::Tensor& p_hat,
                               const nn::Tensor& m, const nn::Tensor& m_hat, double lambda1,
                               double lambda2) {
    if (x.shape() != x_hat.shape() || m.shape() != m_hat.shape() || p.shape() != p_hat.shape())
        throw std::invalid_argument("reconstruction_loss: shape mismatch");
    if (p.dim(0) != 3 || x.dim(1) != p.dim(1) || x.dim(2) != p.dim(2))
        throw std::invalid_argument("reconstruction_loss: coordinate grid mismatch");

    nn::Tensor loss = nn::mean(nn::abs(nn::sub(x, x_hat)));

    if (lambda1 != 0.0) {
        const int64_t plane = static_cast<int64_t>(x.dim(1)) * x.dim(2);
        std::vector<double> mask3(3 * plane);
        double valid = 0.0;
        for (int64_t i = 0; i < plane; ++i) valid += m.data()[i];
        for (int axis = 0; axis < 3; ++axis)
            for (int64_t i = 0; i < plane; ++i) mask3[axis * plane + i] = m.data()[i];
        if (valid > 0.0) {
            nn::Tensor diff = nn::mask_mul(nn::sub(p, p_hat), mask3);
            // Mean squared 3D distance over valid pixels.
            nn::Tensor coord = nn::scale(nn::sum(nn::mul(diff, diff)), 1.0 / valid);
            loss = nn::add(loss, nn::scale(coord, lambda1));
        }
    }
    if (lambda2 != 0.0) {
        nn::Tensor md = nn::sub(m, m_hat);
        loss = nn::add(loss, nn::scale(nn::mean(nn::mul(md, md)), lambda2));
    }
    return loss;
}

namespace {

nn::Tensor disc_input(const nn::Tensor& x, const nn::Tensor& p, const nn::Tensor& m,
                      double max_range) {
    return nn::concat_channels({x, nn::scale(p, 1.0 / max_range), m});
}

nn::Tensor generator_gan_loss(const Discriminator& disc, const nn::Tensor& fake_in,
                              const std::string& form) {
    nn::Tensor fake_logits = disc.logits(fake_in);
    if (form == "hinge") return nn::scale(nn::mean(fake_logits), -1.0);
    if (form == "vanilla") return nn::mean(nn::softplus(nn::scale(fake_logits, -1.0)));
    throw ConfigError("adversarial_losses: unknown form " + form);
}

nn::Tensor discriminator_gan_loss(const Discriminator& disc, const nn::Tensor& real_in,
                                  const nn::Tensor& fake_in_detached, const std::string& form) {
    nn::Tensor real_logits = disc.logits(real_in);
    nn::Tensor fake_logits = disc.logits(fake_in_detached);
    if (form == "hinge")
        return nn::add(nn::mean(nn::relu(nn::add_scalar(nn::scale(real_logits, -1.0), 1.0))),
                       nn::mean(nn::relu(nn::add_scalar(fake_logits, 1.0))));
    if (form == "vanilla")
        // -log sigmoid(real) - log(1 - sigmoid(fake)).
        return nn::add(nn::mean(nn::softplus(nn::scale(real_logits, -1.0))),
                       nn::mean(nn::softplus(fake_logits)));
    throw ConfigError("adversarial_losses: unknown form " + form);
}

}  // namespace

AdvLosses adversarial_losses(const Discriminator& disc, const SceneTensors& real,
                             const nn::Tensor& x_hat, const nn::Tensor& p_hat,
                             const nn::Tensor& m_hat, double max_range,
                             const std::string& form) {
    nn::Tensor real_in = disc_input(real.v, real.p, real.m, max_range);
    nn::Tensor fake_live = disc_input(x_hat, p_hat, m_hat, max_range);
    AdvLosses out;
    out.d_loss = discriminator_gan_loss(disc, real_in, nn::detach(fake_live), form);
    out.g_loss = generator_gan_loss(disc, fake_live, form);
    return out;
}

PerceptualTaps parse_taps(const std::string& name) {
    if (name == "encoder") return PerceptualTaps::encoder;
    if (name == "decoder") return PerceptualTaps::decoder;
    if (name == "all") return PerceptualTaps::all;
    if (name == "final") return PerceptualTaps::final;
    throw ConfigError("unknown perceptual tap mode: " + name);
}

nn::Tensor perceptual_loss(const ToyRangeExtractor& extractor, const nn::Tensor& input_x,
                           const nn::Tensor& input_x_hat, PerceptualTaps taps) {
    const ToyRangeExtractor::Taps tx = extractor.taps(input_x);
    const ToyRangeExtractor::Taps ty = extractor.taps(input_x_hat);

    std::vector<std::pair<nn::Tensor, nn::Tensor>> pairs;
    const bool enc = taps == PerceptualTaps::encoder || taps == PerceptualTaps::all;
    const bool dec = taps == PerceptualTaps::decoder || taps == PerceptualTaps::all;
    if (enc)
        for (size_t i = 0; i < tx.encoder.size(); ++i)
            pairs.emplace_back(tx.encoder[i], ty.encoder[i]);
    if (dec)
        for (size_t i = 0; i < tx.decoder.size(); ++i)
            pairs.emplace_back(tx.decoder[i], ty.decoder[i]);
    if (taps == PerceptualTaps::final) pairs.emplace_back(tx.decoder.back(), ty.decoder.back());

    nn::Tensor loss = nn::Tensor::scalar(0.0);
    for (const auto& [fx, fy] : pairs) {
        nn::Tensor diff = nn::sub(fx, fy);
        loss = nn::add(loss, nn::mean(nn::mul(diff, diff)));
    }
    return loss;
}

// ---- training ----

namespace {

void append_csv_header(std::ofstream& os) {
    os << "step,total,l1,coord,mask,vq,perceptual,g_loss,d_loss\n";
}

struct TermValues {
    double l1 = 0.0, coord = 0.0, mask = 0.0;
};

TermValues loss_terms(const SceneTensors& scene, const nn::Tensor& v_hat,
                      const nn::Tensor& p_hat, const nn::Tensor& m_hat) {
    // Plain (graph-free) term diagnostics for the CSV.
    TermValues tv;
    const int64_t plane = scene.v.numel();
    double valid = 0.0;
    for (int64_t i = 0; i < plane; ++i) {
        tv.l1 += std::abs(scene.v.data()[i] - v_hat.data()[i]);
        const double md = scene.m.data()[i] - m_hat.data()[i];
        tv.mask += md * md;
        valid += scene.m.data()[i];
    }
    tv.l1 /= static_cast<double>(plane);
    tv.mask /= static_cast<double>(plane);
    if (valid > 0.0) {
        double acc = 0.0;
        for (int axis = 0; axis < 3; ++axis)
            for (int64_t i = 0; i < plane; ++i) {
                if (scene.m.data()[i] == 0.0) continue;
                const double d =
                    scene.p.data()[axis * plane + i] - p_hat.data()[axis * plane + i];
                acc += d * d;
            }
        tv.coord = acc / valid;
    }
    return tv;
}

}  // namespace

AeTrainResult train_autoencoder(const std::vector<RangeImage>& dataset,
                                const CompressionConfig& cfg, const SensorConfig& sensor,
                                const AeTrainOptions& opts) {
    if (dataset.empty()) throw InsufficientDataError("train_autoencoder: empty dataset");
    cfg.validate(sensor);

    Autoencoder ae(cfg, sensor, opts.seed);
    Discriminator disc(std::max(8, cfg.base_channels / 2), opts.seed + 1);
    ToyRangeExtractor perceptual_net(opts.seed + 2);

    nn::Adam opt_ae, opt_d;
    opt_ae.lr = cfg.lr;
    opt_d.lr = cfg.disc_lr;
    Rng rng(opts.seed ^ 0x5eedf00dULL);
    uint64_t start_step = 0;

    if (opts.resume_from) {
        const Checkpoint ckpt = load_checkpoint(*opts.resume_from);
        if (ckpt.config.count("kind") == 0 || ckpt.config.at("kind") != "autoencoder")
            throw CheckpointMismatchError("resume: checkpoint is not an autoencoder");
        ckpt.restore_params(ae.params());
        ckpt.restore_params(disc.params(), "disc/");
        ckpt.restore_adam(opt_ae, ae.params(), "opt_ae.");
        ckpt.restore_adam(opt_d, disc.params(), "opt_d.");
        rng.set_state(ckpt.rng_state);
        start_step = ckpt.step;
        if (const nn::Tensor* usage = ckpt.find("codebook_usage"))
            for (int64_t i = 0; i < usage->numel(); ++i)
                ae.codebook().usage[i] = static_cast<uint64_t>(usage->data()[i]);
    }

    std::vector<SceneTensors> scenes;
    scenes.reserve(dataset.size());
    for (const RangeImage& img : dataset) scenes.push_back(scene_tensors(img));

    std::ofstream csv;
    if (!opts.csv_path.empty()) {
        csv.open(opts.csv_path, start_step == 0 ? std::ios::trunc : std::ios::app);
        if (!csv) throw IoError("cannot open loss csv: " + opts.csv_path.string());
        if (start_step == 0) append_csv_header(csv);
    }

    const PerceptualTaps tap_mode = parse_taps(cfg.perceptual_taps);
    AeTrainResult result;
    result.final_step = start_step;

    for (uint64_t step = start_step + 1; step <= static_cast<uint64_t>(opts.steps); ++step) {
        const bool gan_active =
            cfg.gan_weight > 0.0 && static_cast<long long>(step) > cfg.gan_start_step;

        std::vector<size_t> batch(cfg.batch_size);
        for (int i = 0; i < cfg.batch_size; ++i) batch[i] = rng.below(scenes.size());

        opt_ae.zero_grad(ae.params().tensors());

        double total = 0.0, l1 = 0.0, coord = 0.0, mask_term = 0.0, vq = 0.0, perc = 0.0,
               g_val = 0.0, d_val = 0.0;
        nn::Tensor ae_loss = nn::Tensor::scalar(0.0);
        std::vector<nn::Tensor> batch_latents;
        struct FakeTriple {
            nn::Tensor x, p, m;
            size_t scene;
        };
        std::vector<FakeTriple> fakes;

        for (size_t idx : batch) {
            const SceneTensors& scene = scenes[idx];
            nn::Tensor z = ae.encode(scene.net_input);
            Autoencoder::Decoded dec = ae.decode(z);
            nn::Tensor p_hat = nn::coord_image(dec.v_hat, sensor);

            nn::Tensor loss = reconstruction_loss(scene.v, dec.v_hat, scene.p, p_hat, scene.m,
                                                  dec.m_hat, cfg.lambda_coord, cfg.lambda_mask);
            loss = nn::add(loss, dec.quant.vq_loss);
            vq += dec.quant.vq_loss.item();
            if (cfg.perceptual_weight > 0.0) {
                nn::Tensor x_hat_input = nn::concat_channels(
                    {nn::add_scalar(nn::scale(dec.v_hat, 2.0), -1.0), dec.m_hat});
                nn::Tensor pl =
                    perceptual_loss(perceptual_net, scene.net_input, x_hat_input, tap_mode);
                loss = nn::add(loss, nn::scale(pl, cfg.perceptual_weight));
                perc += pl.item();
            }
            if (gan_active) {
                nn::Tensor g_loss = generator_gan_loss(
                    disc, disc_input(dec.v_hat, p_hat, dec.m_hat, sensor.max_range),
                    cfg.gan_loss);
                loss = nn::add(loss, nn::scale(g_loss, cfg.gan_weight));
                g_val += g_loss.item();
            }
            ae_loss = nn::add(ae_loss, loss);
            batch_latents.push_back(nn::detach(z));
            fakes.push_back({nn::detach(dec.v_hat), nn::detach(p_hat), nn::detach(dec.m_hat),
                             idx});

            const TermValues tv = loss_terms(scene, dec.v_hat, p_hat, dec.m_hat);
            l1 += tv.l1;
            coord += tv.coord;
            mask_term += tv.mask;
        }
        ae_loss = nn::scale(ae_loss, 1.0 / cfg.batch_size);
        total = ae_loss.item();

        if (!std::isfinite(total)) {
            if (!opts.checkpoint_path.empty()) {
                std::ofstream dump(opts.checkpoint_path.string() + ".divergence.txt");
                dump << "step = " << step << "\nloss = " << total << "\nl1 = " << l1
                     << "\nvq = " << vq << "\n";
            }
            throw DivergenceError("train_autoencoder: non-finite loss at step " +
                                  std::to_string(step));
        }

        nn::backward(ae_loss);
        opt_ae.step(ae.params().tensors());

        if (gan_active) {
            opt_d.zero_grad(disc.params().tensors());
            nn::Tensor d_loss = nn::Tensor::scalar(0.0);
            for (const FakeTriple& fake : fakes) {
                const SceneTensors& scene = scenes[fake.scene];
                d_loss = nn::add(
                    d_loss, discriminator_gan_loss(
                                disc, disc_input(scene.v, scene.p, scene.m, sensor.max_range),
                                disc_input(fake.x, fake.p, fake.m, sensor.max_range),
                                cfg.gan_loss));
            }
            d_loss = nn::scale(d_loss, 1.0 / cfg.batch_size);
            d_val = d_loss.item();
            nn::backward(d_loss);
            opt_d.step(disc.params().tensors());
        }

        if (cfg.codebook_reseed_interval > 0 &&
            step % static_cast<uint64_t>(cfg.codebook_reseed_interval) == 0)
            ae.reseed_dead_entries(batch_latents, rng);

        const int n = cfg.batch_size;
        if (csv.is_open())
            csv << step << ',' << total << ',' << l1 / n << ',' << coord / n << ','
                << mask_term / n << ',' << vq / n << ',' << perc / n << ',' << g_val / n << ','
                << d_val << '\n';
        if (!opts.quiet && step % 50 == 0)
            std::cerr << "step " << step << " loss " << total << " l1 " << l1 / n << "\n";

        result.final_step = step;
        result.final_loss = total;
        result.final_l1 = l1 / n;
    }

    if (!opts.checkpoint_path.empty()) {
        Checkpoint ckpt;
        ckpt.config["kind"] = "autoencoder";
        ckpt.config["seed"] = std::to_string(opts.seed);
        ckpt.config["sensor.height"] = std::to_string(sensor.height);
        ckpt.config["sensor.width"] = std::to_string(sensor.width);
        ckpt.config["sensor.fov_up_deg"] = fmt_double(sensor.fov_up_deg);
        ckpt.config["sensor.fov_down_deg"] = fmt_double(sensor.fov_down_deg);
        ckpt.config["sensor.omega"] = fmt_double(sensor.omega);
        ckpt.config["ae.f_c"] = std::to_string(cfg.f_c);
        ckpt.config["ae.f_p"] = std::to_string(cfg.f_p);
        ckpt.config["ae.latent_dim"] = std::to_string(cfg.latent_dim);
        ckpt.config["ae.codebook_size"] = std::to_string(cfg.codebook_size);
        ckpt.config["ae.base_channels"] = std::to_string(cfg.base_channels);
        ckpt.config["ae.num_res_blocks"] = std::to_string(cfg.num_res_blocks);
        ckpt.add_params(ae.params());
        ckpt.add_params(disc.params(), "disc/");
        ckpt.add_adam(opt_ae, ae.params(), "opt_ae.");
        ckpt.add_adam(opt_d, disc.params(), "opt_d.");
        {
            std::vector<double> usage(ae.codebook().usage.begin(), ae.codebook().usage.end());
            ckpt.add_array("codebook_usage",
                           nn::Tensor::from_data({cfg.codebook_size}, std::move(usage)));
        }
        ckpt.rng_state = rng.state();
        ckpt.step = result.final_step;
        save_checkpoint(ckpt, opts.checkpoint_path);
    }
    return result;
}

SensorConfig sensor_from_checkpoint(const Checkpoint& ckpt) {
    const auto get = [&](const std::string& key) {
        const auto it = ckpt.config.find(key);
        if (it == ckpt.config.end())
            throw CheckpointMismatchError("checkpoint missing config key: " + key);
        return it->second;
    };
    return SensorConfig::custom(std::stoi(get("sensor.height")), std::stoi(get("sensor.width")),
                                std::stod(get("sensor.fov_up_deg")),
                                std::stod(get("sensor.fov_down_deg")),
                                std::stod(get("sensor.omega")));
}

CompressionConfig compression_from_checkpoint(const Checkpoint& ckpt) {
    const auto get = [&](const std::string& key) {
        const auto it = ckpt.config.find(key);
        if (it == ckpt.config.end())
            throw CheckpointMismatchError("checkpoint missing config key: " + key);
        return it->second;
    };
    CompressionConfig cfg;
    cfg.f_c = std::stoi(get("ae.f_c"));
    cfg.f_p = std::stoi(get("ae.f_p"));
    cfg.latent_dim = std::stoi(get("ae.latent_dim"));
    cfg.codebook_size = std::stoi(get("ae.codebook_size"));
    cfg.base_channels = std::stoi(get("ae.base_channels"));
    cfg.num_res_blocks = std::stoi(get("ae.num_res_blocks"));
    return cfg;
}

Autoencoder autoencoder_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
    const SensorConfig sensor = sensor_from_checkpoint(ckpt);
    const CompressionConfig cfg = compression_from_checkpoint(ckpt);
    Autoencoder ae(cfg, sensor, /*init_seed=*/0);
    ckpt.restore_params(ae.params(), prefix);
    return ae;
}

}  // namespace rangegen
