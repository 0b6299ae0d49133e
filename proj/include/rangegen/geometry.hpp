#pragma once

#include <cstdint>
#include <vector>

#include "rangegen/sensor.hpp"

namespace rangegen {

struct Point3 {
    double x = 0.0, y = 0.0, z = 0.0;
};

/// Unordered set of 3D points. Intensity is carried through file round trips
/// but ignored by every computation.
struct PointCloud {
    std::vector<Point3> points;
    std::vector<float> intensity;  // empty or points.size()

    size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
};

/// H x W grid of depths in meters. Invalid pixels hold the sentinel -1.0 so
/// grids compare with plain equality; the validity mask is derived from the
/// sentinel rather than stored, which keeps the two from ever disagreeing.
struct RangeImage {
    SensorConfig cfg;
    std::vector<float> depth;  // row-major H*W, -1.0f where invalid

    RangeImage() = default;
    explicit RangeImage(const SensorConfig& c)
        : cfg(c), depth(static_cast<size_t>(c.height) * c.width, -1.0f) {}

    float at(int row, int col) const { return depth[static_cast<size_t>(row) * cfg.width + col]; }
    float& at(int row, int col) { return depth[static_cast<size_t>(row) * cfg.width + col]; }
    bool valid(int row, int col) const { return at(row, col) >= 0.0f; }

    std::vector<uint8_t> mask() const {
        std::vector<uint8_t> m(depth.size());
        for (size_t i = 0; i < depth.size(); ++i) m[i] = depth[i] >= 0.0f ? 1 : 0;
        return m;
    }

    size_t valid_count() const {
        size_t n = 0;
        for (float d : depth) n += d >= 0.0f;
        return n;
    }

    bool operator==(const RangeImage& o) const { return cfg == o.cfg && depth == o.depth; }
};

/// depth = 2^(omega * v) - 1 for v in [0, 1]. Monotone; decode_depth(1) == max_range.
double decode_depth(double v, const SensorConfig& cfg);

/// v = log2(depth + 1) / omega, the exact inverse of decode_depth. Depths above
/// max_range are clamped to max_range; pass a counter to observe how often.
double encode_depth(double d, const SensorConfig& cfg, uint64_t* clamp_count = nullptr);

/// 3D point of the pixel at normalized location (a, b) with pixel value v.
/// yaw = (2a - 1) * pi, pitch = (1 - b) * (fov_up - fov_down) + fov_down.
Point3 pixel_to_point(double a, double b, double v, const SensorConfig& cfg);

struct PixelCoord {
    int row = 0;
    int col = 0;
    double v = 0.0;
};

/// Inverse of pixel_to_point. Column wraps modulo W (yaw is periodic), row
/// clamps. Throws DegeneratePointError on the zero point and OutOfFovError
/// when the pitch leaves [fov_down, fov_up].
PixelCoord point_to_pixel(const Point3& p, const SensorConfig& cfg,
                          uint64_t* clamp_count = nullptr);

/// One point per valid pixel, evaluated at pixel centers a = (c+0.5)/W,
/// b = (r+0.5)/H.
PointCloud unproject(const RangeImage& img);

struct ProjectResult {
    RangeImage image;
    uint64_t dropped_out_of_fov = 0;
    uint64_t dropped_degenerate = 0;
    uint64_t clamped_ranges = 0;
};

/// Spherical projection with nearest-point-wins occlusion handling. Points
/// outside the vertical fov are dropped (counted); ranges beyond max_range
/// are clamped (counted).
ProjectResult project(const PointCloud& cloud, const SensorConfig& cfg);

}  // namespace rangegen
