#include "rangegen/curves.hpp"

#include <algorithm>
#include <sstream>

namespace rangegen {

namespace {

Curve make_curve(const RangeImage& img, int row, int start_col, int length) {
    const int W = img.cfg.width;
    Curve curve;
    curve.row = row;
    curve.start_col = start_col;
    curve.pixels.reserve(length);
    curve.points.reserve(length);
    const double b = (row + 0.5) / img.cfg.height;
    for (int k = 0; k < length; ++k) {
        const int col = (start_col + k) % W;
        const float d = img.at(row, col);
        curve.pixels.emplace_back(col, d);
        const double a = (col + 0.5) / W;
        curve.points.push_back(pixel_to_point(a, b, encode_depth(d, img.cfg), img.cfg));
    }
    return curve;
}

}  // namespace

CurveCloud extract_curves(const RangeImage& img) {
    const int H = img.cfg.height;
    const int W = img.cfg.width;
    CurveCloud cc;
    for (int r = 0; r < H; ++r) {
        int first_invalid = -1;
        for (int c = 0; c < W; ++c) {
            if (!img.valid(r, c)) {
                first_invalid = c;
                break;
            }
        }
        if (first_invalid < 0) {
            // Fully valid row: circular segmentation is ambiguous, anchor at 0.
            cc.curves.push_back(make_curve(img, r, 0, W));
            continue;
        }
        // Walk one full revolution starting just past an invalid pixel so every
        // circular run is seen exactly once. The revolution ends back on the
        // invalid anchor, which closes any run still open.
        int run_start = -1;
        for (int k = 1; k <= W; ++k) {
            const int c = (first_invalid + k) % W;
            if (img.valid(r, c)) {
                if (run_start < 0) run_start = c;
            } else if (run_start >= 0) {
                const int len = (c - run_start + W) % W;
                cc.curves.push_back(make_curve(img, r, run_start, len));
                run_start = -1;
            }
        }
    }
    std::sort(cc.curves.begin(), cc.curves.end(), [](const Curve& a, const Curve& b) {
        return a.row != b.row ? a.row < b.row : a.start_col < b.start_col;
    });
    return cc;
}

CurveStats curve_stats(const CurveCloud& cc) {
    CurveStats stats;
    stats.curve_count = cc.curves.size();
    for (const Curve& c : cc.curves) {
        stats.total_pixels += c.pixels.size();
        ++stats.length_histogram[c.length()];
    }
    stats.mean_length =
        stats.curve_count == 0 ? 0.0 : static_cast<double>(stats.total_pixels) / stats.curve_count;
    return stats;
}

std::string format_curve_report(const CurveStats& stats) {
    std::ostringstream os;
    os << "curves = " << stats.curve_count << "\n";
    os << "valid_pixels = " << stats.total_pixels << "\n";
    os << "mean_length = " << stats.mean_length << "\n";
    for (const auto& [len, count] : stats.length_histogram)
        os << "length[" << len << "] = " << count << "\n";
    return os.str();
}

}  // namespace rangegen
