#include "rangegen/nn/modules.hpp"

#include <cmath>
#include <stdexcept>

namespace rangegen::nn {

void quantize_f32(Tensor& t) {
    double* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
}

Tensor ParamStore::create(const std::string& name, const Shape& shape, double init_std,
                          Rng& rng) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter: " + name);
    Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, init_std);
    quantize_f32(t);
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
}

Tensor ParamStore::create_const(const std::string& name, const Shape& shape, double fill) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter: " + name);
    Tensor t = Tensor::full(shape, static_cast<double>(static_cast<float>(fill)));
    t.node()->requires_grad = true;
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) != 0; }

Tensor ParamStore::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::logic_error("unknown parameter: " + name);
    return entries_[it->second].second;
}

std::vector<Tensor> ParamStore::tensors() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& [name, t] : entries_) out.push_back(t);
    return out;
}

int64_t ParamStore::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
}

void Adam::step(const std::vector<Tensor>& params) {
    if (m.size() != params.size()) {
        m.resize(params.size());
        v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].numel(), 0.0);
            v[i].assign(params[i].numel(), 0.0);
        }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i];
        const double* g = p.grad();
        double* value = p.data();
        for (int64_t j = 0; j < p.numel(); ++j) {
            m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g[j];
            v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j];
            const double mhat = m[i][j] / bc1;
            const double vhat = v[i][j] / bc2;
            value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            // Keep everything on the f32 grid (see quantize_f32).
            value[j] = static_cast<double>(static_cast<float>(value[j]));
            m[i][j] = static_cast<double>(static_cast<float>(m[i][j]));
            v[i][j] = static_cast<double>(static_cast<float>(v[i][j]));
        }
    }
}

void Adam::zero_grad(const std::vector<Tensor>& params) {
    for (const Tensor& p : params) {
        Tensor t = p;
        double* g = t.grad();
        std::fill(g, g + t.numel(), 0.0);
    }
}

Conv2d::Conv2d(ParamStore& store, const std::string& prefix, int in_c, int out_c, int kh,
               int kw, int stride_y_, int stride_x_, Rng& rng)
    : stride_y(stride_y_), stride_x(stride_x_) {
    const double std = std::sqrt(2.0 / (static_cast<double>(in_c) * kh * kw));
    weight = store.create(prefix + ".weight", {out_c, in_c, kh, kw}, std, rng);
    bias = store.create_const(prefix + ".bias", {out_c}, 0.0);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, stride_y, stride_x); }

Linear::Linear(ParamStore& store, const std::string& prefix, int in_dim, int out_dim, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in_dim));
    weight = store.create(prefix + ".weight", {out_dim, in_dim}, bound, rng);
    bias = store.create_const(prefix + ".bias", {out_dim}, 0.0);
    for (int i = 0; i < out_dim; ++i)
        bias.data()[i] =
            static_cast<double>(static_cast<float>(rng.uniform(-bound, bound)));
}

Tensor Linear::forward(const Tensor& rows) const {
    return add_rowvec(matmul(rows, transpose(weight)), bias);
}

GroupNorm::GroupNorm(ParamStore& store, const std::string& prefix, int channels, Rng&) {
    gamma = store.create_const(prefix + ".gamma", {channels}, 1.0);
    beta = store.create_const(prefix + ".beta", {channels}, 0.0);
    groups = channels % 8 == 0 ? 8 : (channels % 4 == 0 ? 4 : 1);
}

Tensor GroupNorm::forward(const Tensor& x) const { return group_norm(x, gamma, beta, groups); }

ResBlock::ResBlock(ParamStore& store, const std::string& prefix, int in_c, int out_c, int kh,
                   int kw, Rng& rng, int time_dim) {
    norm1 = GroupNorm(store, prefix + ".norm1", in_c, rng);
    conv1 = Conv2d(store, prefix + ".conv1", in_c, out_c, kh, kw, 1, 1, rng);
    norm2 = GroupNorm(store, prefix + ".norm2", out_c, rng);
    conv2 = Conv2d(store, prefix + ".conv2", out_c, out_c, kh, kw, 1, 1, rng);
    // Zero-initialized second conv: the block starts as (a projection of)
    // the identity, which keeps deep stacks trainable from step one.
    std::fill(conv2.weight.data(), conv2.weight.data() + conv2.weight.numel(), 0.0);
    has_skip = in_c != out_c;
    if (has_skip) skip = Conv2d(store, prefix + ".skip", in_c, out_c, 1, 1, 1, 1, rng);
    has_time = time_dim > 0;
    if (has_time) time_proj = Linear(store, prefix + ".time", time_dim, out_c, rng);
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& time_emb) const {
    Tensor h = conv1.forward(silu(norm1.forward(x)));
    if (has_time) {
        if (!time_emb.defined()) throw std::logic_error("ResBlock: missing time embedding");
        Tensor emb = time_proj.forward(time_emb);  // [1, out_c]
        h = bias_add_channels(h, reshape(emb, {emb.dim(1)}));
    }
    h = conv2.forward(silu(norm2.forward(h)));
    return add(h, has_skip ? skip.forward(x) : x);
}

SelfAttention2d::SelfAttention2d(ParamStore& store, const std::string& prefix, int channels_,
                                 Rng& rng)
    : channels(channels_) {
    norm = GroupNorm(store, prefix + ".norm", channels_, rng);
    to_q = Linear(store, prefix + ".q", channels_, channels_, rng);
    to_k = Linear(store, prefix + ".k", channels_, channels_, rng);
    to_v = Linear(store, prefix + ".v", channels_, channels_, rng);
    to_out = Linear(store, prefix + ".out", channels_, channels_, rng);
}

Tensor SelfAttention2d::forward(const Tensor& x) const {
    const int height = x.dim(1), width = x.dim(2);
    Tensor rows = image_to_rows(norm.forward(x));  // [N,C]
    Tensor q = to_q.forward(rows);
    Tensor k = to_k.forward(rows);
    Tensor v = to_v.forward(rows);
    Tensor attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(channels)));
    Tensor out = to_out.forward(matmul(attn, v));
    return add(x, rows_to_image(out, height, width));
}

CrossAttention2d::CrossAttention2d(ParamStore& store, const std::string& prefix, int channels_,
                                   int token_dim, Rng& rng)
    : channels(channels_) {
    norm = GroupNorm(store, prefix + ".norm", channels_, rng);
    to_q = Linear(store, prefix + ".q", channels_, channels_, rng);
    to_k = Linear(store, prefix + ".k", token_dim, channels_, rng);
    to_v = Linear(store, prefix + ".v", token_dim, channels_, rng);
    to_out = Linear(store, prefix + ".out", channels_, channels_, rng);
}

Tensor CrossAttention2d::forward(const Tensor& x, const Tensor& tokens) const {
    if (!tokens.defined() || tokens.dim(0) == 0) return x;
    const int height = x.dim(1), width = x.dim(2);
    Tensor rows = image_to_rows(norm.forward(x));
    Tensor q = to_q.forward(rows);
    Tensor k = to_k.forward(tokens);
    Tensor v = to_v.forward(tokens);
    Tensor attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(channels)));
    Tensor out = to_out.forward(matmul(attn, v));
    return add(x, rows_to_image(out, height, width));
}

Tensor timestep_features(int t, int dim) {
    if (dim % 2 != 0) throw std::invalid_argument("timestep_features: dim must be even");
    const int half = dim / 2;
    std::vector<double> feat(dim);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        feat[i] = std::sin(t * freq);
        feat[half + i] = std::cos(t * freq);
    }
    return Tensor::from_data({1, dim}, std::move(feat));
}

}  // namespace rangegen::nn
