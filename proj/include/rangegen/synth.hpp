#pragma once

#include <cstdint>
#include <vector>

#include "rangegen/geometry.hpp"

namespace rangegen {

// Geometric primitives for the procedural scene generator. The sensor sits
// at the origin; all primitives are placed within max_range.
struct Box {
    Point3 center;
    Point3 half_extents;
    double yaw = 0.0;
};

struct Cylinder {
    Point3 center;
    double radius = 0.5;
    double height = 1.0;
};

/// Vertical rectangle whose outward normal points along `yaw` in the
/// horizontal plane.
struct Wall {
    Point3 center;
    double yaw = 0.0;
    double width = 4.0;
    double height = 2.0;
};

struct SceneSpec {
    bool has_ground = true;
    double ground_height = -1.73;  // meters below the sensor
    std::vector<Box> boxes;
    std::vector<Cylinder> cylinders;
    std::vector<Wall> walls;
    uint64_t seed = 0;
    double depth_noise_std = 0.0;  // optional Gaussian depth jitter, off by default
};

/// Casts one ray per pixel from the origin; nearest positive hit within
/// max_range wins, otherwise the pixel is invalid. Pure function of
/// (scene, cfg); rows are independent, so any worker count yields the same
/// image.
RangeImage raycast(const SceneSpec& scene, const SensorConfig& cfg, int workers = 1);

struct SceneParams {
    int min_boxes = 2, max_boxes = 6;
    int min_cylinders = 1, max_cylinders = 4;
    int min_walls = 1, max_walls = 3;
    double placement_radius_min = 3.0, placement_radius_max = 30.0;
    double box_extent_min = 0.4, box_extent_max = 2.5;
    double cylinder_radius_min = 0.15, cylinder_radius_max = 1.0;
    double cylinder_height_min = 0.5, cylinder_height_max = 4.0;
    double wall_width_min = 2.0, wall_width_max = 12.0;
    double wall_height_min = 1.0, wall_height_max = 4.0;
    bool ground = true;
    double ground_height = -1.73;
    double depth_noise_std = 0.0;

    void validate() const;
};

/// Deterministic scene as a function of (seed, params).
SceneSpec make_random_scene(uint64_t seed, const SceneParams& params = {});

}  // namespace rangegen
