#include "rangegen/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rangegen/parallel.hpp"
#include "rangegen/rng.hpp"

namespace rangegen {

namespace {

constexpr double kNoHit = std::numeric_limits<double>::infinity();

struct Ray {
    double dx, dy, dz;  // unit direction from the origin
};

double intersect_ground(const Ray& ray, double ground_z) {
    // Plane z = ground_z with the sensor above it.
    if (ray.dz >= 0.0) return kNoHit;
    const double t = ground_z / ray.dz;
    return t > 0.0 ? t : kNoHit;
}

double intersect_box(const Ray& ray, const Box& box) {
    // Slab test in the box frame (rotate by -yaw around z).
    const double c = std::cos(-box.yaw), s = std::sin(-box.yaw);
    const double ox = -box.center.x, oy = -box.center.y, oz = -box.center.z;
    const double lox = c * ox - s * oy;
    const double loy = s * ox + c * oy;
    const double ldx = c * ray.dx - s * ray.dy;
    const double ldy = s * ray.dx + c * ray.dy;

    double tmin = 0.0, tmax = kNoHit;
    const double origin[3] = {lox, loy, oz};
    const double dir[3] = {ldx, ldy, ray.dz};
    const double ext[3] = {box.half_extents.x, box.half_extents.y, box.half_extents.z};
    for (int axis = 0; axis < 3; ++axis) {
        if (dir[axis] == 0.0) {
            if (std::abs(origin[axis]) > ext[axis]) return kNoHit;
            continue;
        }
        double t1 = (-ext[axis] - origin[axis]) / dir[axis];
        double t2 = (ext[axis] - origin[axis]) / dir[axis];
        if (t1 > t2) std::swap(t1, t2);
        tmin = std::max(tmin, t1);
        tmax = std::min(tmax, t2);
        if (tmin > tmax) return kNoHit;
    }
    return tmin > 0.0 ? tmin : kNoHit;
}

double intersect_cylinder(const Ray& ray, const Cylinder& cyl) {
    const double zlo = cyl.center.z - cyl.height / 2.0;
    const double zhi = cyl.center.z + cyl.height / 2.0;
    double best = kNoHit;

    // Side surface: quadratic in the xy plane.
    const double ox = -cyl.center.x, oy = -cyl.center.y;
    const double a = ray.dx * ray.dx + ray.dy * ray.dy;
    if (a > 0.0) {
        const double b = 2.0 * (ox * ray.dx + oy * ray.dy);
        const double cq = ox * ox + oy * oy - cyl.radius * cyl.radius;
        const double disc = b * b - 4.0 * a * cq;
        if (disc >= 0.0) {
            const double sq = std::sqrt(disc);
            for (double t : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
                if (t <= 0.0) continue;
                const double z = t * ray.dz;
                if (z >= zlo && z <= zhi) best = std::min(best, t);
            }
        }
    }
    // End caps.
    for (double zcap : {zlo, zhi}) {
        if (ray.dz == 0.0) continue;
        const double t = zcap / ray.dz;
        if (t <= 0.0) continue;
        const double hx = t * ray.dx - cyl.center.x;
        const double hy = t * ray.dy - cyl.center.y;
        if (hx * hx + hy * hy <= cyl.radius * cyl.radius) best = std::min(best, t);
    }
    return best;
}

double intersect_wall(const Ray& ray, const Wall& wall) {
    // Plane through the center with horizontal normal (cos yaw, sin yaw, 0).
    const double nx = std::cos(wall.yaw), ny = std::sin(wall.yaw);
    const double denom = ray.dx * nx + ray.dy * ny;
    if (denom == 0.0) return kNoHit;
    const double t = (wall.center.x * nx + wall.center.y * ny) / denom;
    if (t <= 0.0) return kNoHit;
    // Bounds check in the wall's tangent frame.
    const double hx = t * ray.dx - wall.center.x;
    const double hy = t * ray.dy - wall.center.y;
    const double hz = t * ray.dz - wall.center.z;
    const double u = -hx * ny + hy * nx;  // along the wall's width
    if (std::abs(u) > wall.width / 2.0) return kNoHit;
    if (std::abs(hz) > wall.height / 2.0) return kNoHit;
    return t;
}

}  // namespace

RangeImage raycast(const SceneSpec& scene, const SensorConfig& cfg, int workers) {
    RangeImage img(cfg);
    const double fov_span = cfg.fov_up_rad() - cfg.fov_down_rad();
    parallel_for(static_cast<size_t>(cfg.height), workers, [&](size_t row) {
        const int r = static_cast<int>(row);
        const double b = (r + 0.5) / cfg.height;
        const double pitch = (1.0 - b) * fov_span + cfg.fov_down_rad();
        const double cp = std::cos(pitch), sp = std::sin(pitch);
        for (int c = 0; c < cfg.width; ++c) {
            const double a = (c + 0.5) / cfg.width;
            const double yaw = (2.0 * a - 1.0) * M_PI;
            const Ray ray{std::cos(yaw) * cp, -std::sin(yaw) * cp, sp};

            double t = kNoHit;
            if (scene.has_ground) t = std::min(t, intersect_ground(ray, scene.ground_height));
            for (const Box& box : scene.boxes) t = std::min(t, intersect_box(ray, box));
            for (const Cylinder& cyl : scene.cylinders)
                t = std::min(t, intersect_cylinder(ray, cyl));
            for (const Wall& wall : scene.walls) t = std::min(t, intersect_wall(ray, wall));

            if (scene.depth_noise_std > 0.0 && t < kNoHit) {
                // Per-pixel jitter from a counter-based stream: raycast stays a
                // pure function of (scene, cfg).
                Rng pixel_rng = Rng::substream(scene.seed,
                                               static_cast<uint64_t>(r) * cfg.width + c);
                t = std::max(1e-3, t + pixel_rng.normal(0.0, scene.depth_noise_std));
            }
            if (t > 0.0 && t <= cfg.max_range) img.at(r, c) = static_cast<float>(t);
        }
    });
    return img;
}

void SceneParams::validate() const {
    if (min_boxes > max_boxes || min_cylinders > max_cylinders || min_walls > max_walls)
        throw ConfigError("scene params: min count exceeds max count");
    if (placement_radius_min <= 0.0 || placement_radius_max < placement_radius_min)
        throw ConfigError("scene params: degenerate placement radius range");
}

SceneSpec make_random_scene(uint64_t seed, const SceneParams& params) {
    params.validate();
    Rng rng(seed);
    SceneSpec scene;
    scene.seed = seed;
    scene.has_ground = params.ground;
    scene.ground_height = params.ground_height;
    scene.depth_noise_std = params.depth_noise_std;

    auto place = [&](double z) {
        const double radius = rng.uniform(params.placement_radius_min, params.placement_radius_max);
        const double angle = rng.uniform(-M_PI, M_PI);
        return Point3{radius * std::cos(angle), radius * std::sin(angle), z};
    };

    const int n_boxes = rng.uniform_int(params.min_boxes, params.max_boxes);
    for (int i = 0; i < n_boxes; ++i) {
        Box box;
        box.half_extents = {rng.uniform(params.box_extent_min, params.box_extent_max),
                            rng.uniform(params.box_extent_min, params.box_extent_max),
                            rng.uniform(params.box_extent_min, params.box_extent_max)};
        box.center = place(params.ground_height + box.half_extents.z);
        box.yaw = rng.uniform(-M_PI, M_PI);
        scene.boxes.push_back(box);
    }
    const int n_cyl = rng.uniform_int(params.min_cylinders, params.max_cylinders);
    for (int i = 0; i < n_cyl; ++i) {
        Cylinder cyl;
        cyl.radius = rng.uniform(params.cylinder_radius_min, params.cylinder_radius_max);
        cyl.height = rng.uniform(params.cylinder_height_min, params.cylinder_height_max);
        cyl.center = place(params.ground_height + cyl.height / 2.0);
        scene.cylinders.push_back(cyl);
    }
    const int n_walls = rng.uniform_int(params.min_walls, params.max_walls);
    for (int i = 0; i < n_walls; ++i) {
        Wall wall;
        wall.width = rng.uniform(params.wall_width_min, params.wall_width_max);
        wall.height = rng.uniform(params.wall_height_min, params.wall_height_max);
        wall.center = place(params.ground_height + wall.height / 2.0);
        // Face roughly toward the sensor so the panel is visible.
        wall.yaw = std::atan2(wall.center.y, wall.center.x) + rng.uniform(-0.5, 0.5);
        scene.walls.push_back(wall);
    }
    return scene;
}

}  // namespace rangegen
