#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "rangegen/geometry.hpp"
#include "rangegen/nn/modules.hpp"
#include "rangegen/rng.hpp"
#include "rangegen/synth.hpp"

namespace testutil {

using namespace rangegen;

inline std::filesystem::path temp_dir(const std::string& tag) {
    static uint64_t counter = 0;
    const auto dir = std::filesystem::temp_directory_path() /
                     ("rangegen_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                      std::to_string(counter++));
    std::filesystem::create_directories(dir);
    return dir;
}

inline SensorConfig small_sensor(int height = 16, int width = 64) {
    return SensorConfig::custom(height, width, 3.0, -25.0, 5.84);
}

/// Random image with a mix of valid and invalid pixels.
inline RangeImage random_image(const SensorConfig& cfg, uint64_t seed,
                               double valid_fraction = 0.7) {
    Rng rng(seed);
    RangeImage img(cfg);
    for (float& d : img.depth)
        if (rng.uniform() < valid_fraction)
            d = static_cast<float>(rng.uniform(0.5, cfg.max_range * 0.95));
    return img;
}

inline RangeImage toy_scene_image(const SensorConfig& cfg, uint64_t seed) {
    SceneParams params;
    params.min_boxes = 1;
    params.max_boxes = 3;
    params.min_cylinders = 0;
    params.max_cylinders = 2;
    params.min_walls = 0;
    params.max_walls = 1;
    params.placement_radius_max = 20.0;
    return raycast(make_random_scene(seed, params), cfg);
}

/// Central-difference gradient check. loss_fn must rebuild the graph from
/// the current parameter values on every call. Checks up to
/// `coords_per_tensor` coordinates of each parameter; returns the maximum
/// relative error observed.
inline double fd_check(const std::function<nn::Tensor()>& loss_fn,
                       const std::vector<nn::Tensor>& params, int coords_per_tensor,
                       uint64_t seed, double step = 1e-5) {
    using nn::Tensor;
    for (const Tensor& p : params) {
        Tensor t = p;
        std::fill(t.grad(), t.grad() + t.numel(), 0.0);
    }
    nn::Tensor loss = loss_fn();
    nn::backward(loss);

    Rng rng(seed);
    double worst = 0.0;
    for (const Tensor& p : params) {
        Tensor t = p;
        const int64_t n = t.numel();
        const int checks = static_cast<int>(std::min<int64_t>(coords_per_tensor, n));
        for (int k = 0; k < checks; ++k) {
            const int64_t i = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
            const double saved = t.data()[i];
            const double h = step * std::max(1.0, std::abs(saved));
            t.data()[i] = saved + h;
            const double plus = loss_fn().item();
            t.data()[i] = saved - h;
            const double minus = loss_fn().item();
            t.data()[i] = saved;
            const double fd = (plus - minus) / (2.0 * h);
            const double analytic = t.grad()[i];
            const double rel = std::abs(fd - analytic) /
                               std::max({std::abs(fd), std::abs(analytic), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

inline nn::Tensor random_tensor(const nn::Shape& shape, uint64_t seed, double scale = 1.0,
                                bool requires_grad = false) {
    nn::Tensor t = nn::Tensor::zeros(shape, requires_grad);
    Rng rng(seed);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, scale);
    return t;
}

/// Rolls a [C,H,W] tensor right by `shift` columns.
inline nn::Tensor roll_columns(const nn::Tensor& t, int shift) {
    nn::Tensor out = nn::Tensor::zeros(t.shape());
    const int channels = t.dim(0), height = t.dim(1), width = t.dim(2);
    shift = ((shift % width) + width) % width;
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                out.data()[(static_cast<int64_t>(c) * height + y) * width + (x + shift) % width] =
                    t.data()[(static_cast<int64_t>(c) * height + y) * width + x];
    return out;
}

inline RangeImage roll_image(const RangeImage& img, int shift) {
    RangeImage out(img.cfg);
    const int width = img.cfg.width;
    shift = ((shift % width) + width) % width;
    for (int r = 0; r < img.cfg.height; ++r)
        for (int c = 0; c < width; ++c) out.at(r, (c + shift) % width) = img.at(r, c);
    return out;
}

inline double max_abs_diff(const nn::Tensor& a, const nn::Tensor& b) {
    double worst = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

}  // namespace testutil
