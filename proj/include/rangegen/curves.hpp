#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rangegen/geometry.hpp"

namespace rangegen {

/// A maximal run of consecutive valid pixels within one range-image row,
/// circular in azimuth. Pixels are ordered left to right with wraparound;
/// points are the corresponding 3D coordinates at pixel centers.
struct Curve {
    int row = 0;
    int start_col = 0;
    std::vector<std::pair<int, float>> pixels;  // (col, depth)
    std::vector<Point3> points;

    int length() const { return static_cast<int>(pixels.size()); }
};

struct CurveCloud {
    std::vector<Curve> curves;
};

/// Decomposes a range image into its curve cloud. Curves partition the valid
/// pixels; a fully valid row yields one curve of length W anchored at column 0.
CurveCloud extract_curves(const RangeImage& img);

struct CurveStats {
    size_t curve_count = 0;
    size_t total_pixels = 0;
    double mean_length = 0.0;
    std::map<int, size_t> length_histogram;
};

CurveStats curve_stats(const CurveCloud& cc);

std::string format_curve_report(const CurveStats& stats);

}  // namespace rangegen
