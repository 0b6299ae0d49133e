#include "rangegen/geometry.hpp"

#include <cmath>

namespace rangegen {

double decode_depth(double v, const SensorConfig& cfg) {
    if (!(v >= 0.0 && v <= 1.0))
        throw std::domain_error("decode_depth: pixel value outside [0, 1]");
    return std::exp2(cfg.omega * v) - 1.0;
}

double encode_depth(double d, const SensorConfig& cfg, uint64_t* clamp_count) {
    if (!(d >= 0.0)) throw std::domain_error("encode_depth: negative depth");
    if (d > cfg.max_range) {
        if (clamp_count) ++*clamp_count;
        d = cfg.max_range;
    }
    return std::log2(d + 1.0) / cfg.omega;
}

Point3 pixel_to_point(double a, double b, double v, const SensorConfig& cfg) {
    if (!(a >= 0.0 && a <= 1.0) || !(b >= 0.0 && b <= 1.0))
        throw std::domain_error("pixel_to_point: normalized location outside [0, 1]");
    const double depth = decode_depth(v, cfg);
    const double yaw = (2.0 * a - 1.0) * M_PI;
    const double pitch = (1.0 - b) * (cfg.fov_up_rad() - cfg.fov_down_rad()) + cfg.fov_down_rad();
    return {std::cos(yaw) * std::cos(pitch) * depth,
            -std::sin(yaw) * std::cos(pitch) * depth,
            std::sin(pitch) * depth};
}

PixelCoord point_to_pixel(const Point3& p, const SensorConfig& cfg, uint64_t* clamp_count) {
    const double norm = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    if (norm == 0.0) throw DegeneratePointError("point_to_pixel: zero-length point");
    const double pitch = std::asin(p.z / norm);
    if (pitch < cfg.fov_down_rad() || pitch > cfg.fov_up_rad())
        throw OutOfFovError("point_to_pixel: pitch outside sensor fov");
    const double yaw = std::atan2(-p.y, p.x);
    const double a = (yaw / M_PI + 1.0) / 2.0;
    const double b = 1.0 - (pitch - cfg.fov_down_rad()) / (cfg.fov_up_rad() - cfg.fov_down_rad());

    PixelCoord out;
    long col = static_cast<long>(std::floor(a * cfg.width)) % cfg.width;
    if (col < 0) col += cfg.width;
    out.col = static_cast<int>(col);
    long row = static_cast<long>(std::floor(b * cfg.height));
    out.row = static_cast<int>(std::min<long>(std::max<long>(row, 0), cfg.height - 1));
    out.v = encode_depth(norm, cfg, clamp_count);
    return out;
}

PointCloud unproject(const RangeImage& img) {
    const SensorConfig& cfg = img.cfg;
    PointCloud cloud;
    cloud.points.reserve(img.valid_count());
    for (int r = 0; r < cfg.height; ++r) {
        const double b = (r + 0.5) / cfg.height;
        for (int c = 0; c < cfg.width; ++c) {
            const float d = img.at(r, c);
            if (d < 0.0f) continue;
            const double a = (c + 0.5) / cfg.width;
            cloud.points.push_back(pixel_to_point(a, b, encode_depth(d, cfg), cfg));
        }
    }
    return cloud;
}

ProjectResult project(const PointCloud& cloud, const SensorConfig& cfg) {
    ProjectResult res;
    res.image = RangeImage(cfg);
    for (const Point3& p : cloud.points) {
        const double norm = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
        if (norm == 0.0) {
            ++res.dropped_degenerate;
            continue;
        }
        PixelCoord px;
        try {
            px = point_to_pixel(p, cfg, &res.clamped_ranges);
        } catch (const OutOfFovError&) {
            ++res.dropped_out_of_fov;
            continue;
        }
        const float range = static_cast<float>(std::min(norm, cfg.max_range));
        float& cell = res.image.at(px.row, px.col);
        if (cell < 0.0f || range < cell) cell = range;
    }
    return res;
}

}  // namespace rangegen
