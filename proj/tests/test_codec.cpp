#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "rangegen/geometry.hpp"

using namespace rangegen;

TEST_CASE("decode_depth endpoints and curve") {
    const SensorConfig cfg64 = SensorConfig::beams64();
    const SensorConfig cfg32 = SensorConfig::beams32();

    CHECK(decode_depth(0.0, cfg64) == 0.0);
    // Independent evaluation of 2^omega - 1 (omega is f32-canonical).
    CHECK(decode_depth(1.0, cfg64) ==
          doctest::Approx(std::exp2(cfg64.omega) - 1.0).epsilon(1e-12));
    CHECK(decode_depth(1.0, cfg64) == doctest::Approx(56.276).epsilon(1e-3));
    CHECK(decode_depth(0.5, cfg32) ==
          doctest::Approx(std::exp2(0.5 * cfg32.omega) - 1.0).epsilon(1e-12));
    CHECK(decode_depth(0.5, cfg32) == doctest::Approx(5.7989).epsilon(1e-3));
    CHECK(decode_depth(1.0, cfg64) == doctest::Approx(cfg64.max_range));

    // Monotone increasing.
    double prev = -1.0;
    for (int i = 0; i <= 100; ++i) {
        const double d = decode_depth(i / 100.0, cfg64);
        CHECK(d > prev);
        prev = d;
    }
    CHECK_THROWS_AS(decode_depth(-0.01, cfg64), std::domain_error);
    CHECK_THROWS_AS(decode_depth(1.01, cfg64), std::domain_error);
}

TEST_CASE("encode_depth inverse, clamping, errors") {
    const SensorConfig cfg = SensorConfig::beams64();
    CHECK(encode_depth(0.0, cfg) == 0.0);
    CHECK(encode_depth(cfg.max_range, cfg) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(encode_depth(decode_depth(0.3, cfg), cfg) == doctest::Approx(0.3).epsilon(1e-12));

    uint64_t clamps = 0;
    CHECK(encode_depth(cfg.max_range * 2.0, cfg, &clamps) == doctest::Approx(1.0));
    CHECK(clamps == 1);
    CHECK_THROWS_AS(encode_depth(-1.0, cfg), std::domain_error);
}

TEST_CASE("encode/decode are mutually inverse bijections") {
    const SensorConfig cfg = SensorConfig::beams32();
    Rng rng(11);
    for (int i = 0; i < 2000; ++i) {
        const double v = rng.uniform();
        CHECK(encode_depth(decode_depth(v, cfg), cfg) == doctest::Approx(v).epsilon(1e-9));
        const double d = rng.uniform(0.0, cfg.max_range);
        CHECK(decode_depth(encode_depth(d, cfg), cfg) ==
              doctest::Approx(d).epsilon(1e-9));
    }
}

TEST_CASE("pixel_to_point axis-aligned examples") {
    const SensorConfig cfg = SensorConfig::beams64();
    // pitch = 0 requires (1-b)*28 - 25 = 0, i.e. b = 3/28.
    const double b0 = 3.0 / 28.0;
    const double v10 = encode_depth(10.0, cfg);

    const Point3 fwd = pixel_to_point(0.5, b0, v10, cfg);
    CHECK(fwd.x == doctest::Approx(10.0).epsilon(1e-9));
    CHECK(fwd.y == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(std::abs(fwd.z) < 1e-9);

    const double d = 7.25;
    const Point3 right = pixel_to_point(0.75, b0, encode_depth(d, cfg), cfg);
    CHECK(std::abs(right.x) < 1e-9);
    CHECK(right.y == doctest::Approx(-d).epsilon(1e-9));
    CHECK(std::abs(right.z) < 1e-9);

    CHECK_THROWS_AS(pixel_to_point(-0.1, 0.5, 0.5, cfg), std::domain_error);
    CHECK_THROWS_AS(pixel_to_point(0.5, 1.1, 0.5, cfg), std::domain_error);
    CHECK_THROWS_AS(pixel_to_point(0.5, 0.5, 2.0, cfg), std::domain_error);
}

TEST_CASE("point_to_pixel forward example and errors") {
    const SensorConfig cfg = SensorConfig::beams64();
    const PixelCoord px = point_to_pixel({10.0, 0.0, 0.0}, cfg);
    CHECK(px.row == 6);  // floor((3/28) * 64)
    CHECK(px.col == 512);
    CHECK(px.v == doctest::Approx(encode_depth(10.0, cfg)).epsilon(1e-12));

    CHECK_THROWS_AS(point_to_pixel({0.0, 0.0, 0.0}, cfg), DegeneratePointError);
    CHECK_THROWS_AS(point_to_pixel({0.0, 0.0, 1.0}, cfg), OutOfFovError);   // straight up
    CHECK_THROWS_AS(point_to_pixel({0.1, 0.0, -1.0}, cfg), OutOfFovError);  // below fov_down
}

TEST_CASE("pixel round trip at pixel centers") {
    for (const SensorConfig& cfg : {SensorConfig::beams64(), SensorConfig::beams32()}) {
        Rng rng(cfg.height);
        for (int i = 0; i < 20000; ++i) {
            const int r = static_cast<int>(rng.below(cfg.height));
            const int c = static_cast<int>(rng.below(cfg.width));
            const double v = rng.uniform(1e-4, 1.0);
            const Point3 p =
                pixel_to_point((c + 0.5) / cfg.width, (r + 0.5) / cfg.height, v, cfg);
            const PixelCoord px = point_to_pixel(p, cfg);
            REQUIRE(px.row == r);
            REQUIRE(px.col == c);
            REQUIRE(px.v == doctest::Approx(v).epsilon(1e-9));
        }
    }
}

TEST_CASE("unproject basics") {
    const SensorConfig cfg = testutil::small_sensor();
    RangeImage empty(cfg);
    CHECK(unproject(empty).empty());

    RangeImage one(cfg);
    one.at(3, 17) = 9.5f;
    const PointCloud cloud = unproject(one);
    REQUIRE(cloud.size() == 1);
    const Point3 expect = pixel_to_point((17 + 0.5) / cfg.width, (3 + 0.5) / cfg.height,
                                         encode_depth(9.5f, cfg), cfg);
    CHECK(cloud.points[0].x == expect.x);
    CHECK(cloud.points[0].y == expect.y);
    CHECK(cloud.points[0].z == expect.z);

    const RangeImage img = testutil::random_image(cfg, 5);
    CHECK(unproject(img).size() == img.valid_count());
}

TEST_CASE("project rules") {
    const SensorConfig cfg = SensorConfig::beams64();

    SUBCASE("empty cloud gives an all-invalid image") {
        const ProjectResult res = project(PointCloud{}, cfg);
        CHECK(res.image.valid_count() == 0);
    }

    SUBCASE("nearest point wins per pixel") {
        const double a = (512 + 0.5) / cfg.width, b = (6 + 0.5) / cfg.height;
        PointCloud cloud;
        cloud.points.push_back(pixel_to_point(a, b, encode_depth(9.0, cfg), cfg));
        cloud.points.push_back(pixel_to_point(a, b, encode_depth(5.0, cfg), cfg));
        const ProjectResult res = project(cloud, cfg);
        CHECK(res.image.at(6, 512) == doctest::Approx(5.0).epsilon(1e-7));
        CHECK(res.image.valid_count() == 1);
    }

    SUBCASE("out-of-fov and degenerate points are dropped with counts") {
        PointCloud cloud;
        cloud.points.push_back({0.0, 0.0, 5.0});   // straight up
        cloud.points.push_back({0.0, 0.0, 0.0});   // degenerate
        cloud.points.push_back({10.0, 0.0, 0.0});  // fine
        const ProjectResult res = project(cloud, cfg);
        CHECK(res.dropped_out_of_fov == 1);
        CHECK(res.dropped_degenerate == 1);
        CHECK(res.image.valid_count() == 1);
    }

    SUBCASE("ranges beyond max_range are clamped with counts") {
        PointCloud cloud;
        cloud.points.push_back({cfg.max_range * 1.5, 0.0, 0.0});
        const ProjectResult res = project(cloud, cfg);
        CHECK(res.clamped_ranges == 1);
        CHECK(res.image.at(6, 512) == doctest::Approx(cfg.max_range));
    }

    SUBCASE("permutation invariance") {
        const RangeImage img = testutil::toy_scene_image(cfg, 3);
        PointCloud cloud = unproject(img);
        PointCloud shuffled = cloud;
        Rng rng(9);
        for (size_t i = shuffled.points.size(); i > 1; --i)
            std::swap(shuffled.points[i - 1], shuffled.points[rng.below(i)]);
        CHECK(project(cloud, cfg).image == project(shuffled, cfg).image);
    }

    SUBCASE("projection of an unprojection only removes points") {
        // Every surviving range equals some input range up to round-off.
        const SensorConfig small = testutil::small_sensor();
        PointCloud cloud;
        Rng rng(23);
        for (int i = 0; i < 500; ++i) {
            const double yaw = rng.uniform(-M_PI, M_PI);
            const double pitch = rng.uniform(small.fov_down_rad(), small.fov_up_rad());
            const double d = rng.uniform(1.0, small.max_range);
            cloud.points.push_back({std::cos(yaw) * std::cos(pitch) * d,
                                    -std::sin(yaw) * std::cos(pitch) * d,
                                    std::sin(pitch) * d});
        }
        std::vector<double> input_ranges;
        for (const Point3& p : cloud.points)
            input_ranges.push_back(std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z));
        std::sort(input_ranges.begin(), input_ranges.end());

        const PointCloud back = unproject(project(cloud, small).image);
        CHECK(back.size() <= cloud.size());
        for (const Point3& p : back.points) {
            const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
            const auto it =
                std::lower_bound(input_ranges.begin(), input_ranges.end(), r - 1e-5);
            REQUIRE(it != input_ranges.end());
            CHECK(*it == doctest::Approx(r).epsilon(1e-5));
        }
    }
}
