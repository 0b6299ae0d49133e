#pragma once

#include <cmath>

#include "rangegen/errors.hpp"

namespace rangegen {

/// Beam geometry and depth scaling of a spinning LiDAR. Depth is stored in
/// pixels as v = log2(depth + 1) / omega, so v = 1 corresponds to max_range
/// = 2^omega - 1 exactly.
struct SensorConfig {
    int height = 64;
    int width = 1024;
    double fov_up_deg = 3.0;
    double fov_down_deg = -25.0;
    double omega = 5.84;
    double max_range = 0.0;  // derived: 2^omega - 1

    static SensorConfig beams32() { return custom(32, 1024, 10.0, -30.0, 5.53); }
    static SensorConfig beams64() { return custom(64, 1024, 3.0, -25.0, 5.84); }

    static SensorConfig custom(int h, int w, double fov_up, double fov_down, double omega) {
        SensorConfig cfg;
        cfg.height = h;
        cfg.width = w;
        // Angles and omega are canonicalized to f32 so that a config written
        // to an LRI1 header (f32 fields) reads back equal.
        cfg.fov_up_deg = static_cast<double>(static_cast<float>(fov_up));
        cfg.fov_down_deg = static_cast<double>(static_cast<float>(fov_down));
        cfg.omega = static_cast<double>(static_cast<float>(omega));
        cfg.max_range = std::exp2(cfg.omega) - 1.0;
        cfg.validate();
        return cfg;
    }

    double fov_up_rad() const { return fov_up_deg * M_PI / 180.0; }
    double fov_down_rad() const { return fov_down_deg * M_PI / 180.0; }

    void validate() const {
        if (height < 1 || width < 1)
            throw ConfigError("sensor: height and width must be >= 1");
        if (!(fov_up_deg > fov_down_deg))
            throw ConfigError("sensor: fov_up must exceed fov_down");
        if (!(omega > 0.0))
            throw ConfigError("sensor: omega must be positive");
        if (!(max_range > 0.0) ||
            std::abs(max_range - (std::exp2(omega) - 1.0)) > 1e-6 * max_range)
            throw ConfigError("sensor: max_range must equal 2^omega - 1");
    }

    bool operator==(const SensorConfig& o) const {
        return height == o.height && width == o.width && fov_up_deg == o.fov_up_deg &&
               fov_down_deg == o.fov_down_deg && omega == o.omega;
    }
};

}  // namespace rangegen
