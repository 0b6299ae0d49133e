#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "rangegen/config.hpp"
#include "rangegen/io.hpp"

using namespace rangegen;
namespace fs = std::filesystem;

TEST_CASE("LRI1 round trip is bit-exact") {
    const auto dir = testutil::temp_dir("lri");
    const RangeImage img = testutil::random_image(testutil::small_sensor(), 9);
    save_lri(img, dir / "a.lri");
    const RangeImage back = load_lri(dir / "a.lri");
    CHECK(back == img);
    CHECK(back.cfg.max_range == doctest::Approx(img.cfg.max_range));
}

TEST_CASE("LRI1 rejects malformed files") {
    const auto dir = testutil::temp_dir("lribad");

    {
        std::ofstream os(dir / "bad_magic.lri", std::ios::binary);
        os << "NOPE" << std::string(64, '\0');
    }
    CHECK_THROWS_AS(load_lri(dir / "bad_magic.lri"), FormatError);

    const RangeImage img = testutil::random_image(testutil::small_sensor(), 2);
    save_lri(img, dir / "ok.lri");
    {
        // Truncate the payload.
        std::ifstream is(dir / "ok.lri", std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
        bytes.resize(bytes.size() / 2);
        std::ofstream os(dir / "trunc.lri", std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(load_lri(dir / "trunc.lri"), FormatError);
    CHECK_THROWS_AS(load_lri(dir / "missing.lri"), IoError);
}

TEST_CASE("KITTI bin round trip preserves records") {
    const auto dir = testutil::temp_dir("bin");
    PointCloud cloud;
    Rng rng(4);
    for (int i = 0; i < 257; ++i) {
        cloud.points.push_back({rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-3, 5)});
        cloud.intensity.push_back(static_cast<float>(rng.uniform()));
    }
    save_kitti_bin(cloud, dir / "c.bin");
    CHECK(fs::file_size(dir / "c.bin") == 257 * 16);
    const PointCloud back = load_kitti_bin(dir / "c.bin");
    REQUIRE(back.size() == cloud.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back.points[i].x == static_cast<float>(cloud.points[i].x));
        CHECK(back.intensity[i] == cloud.intensity[i]);
    }

    {
        std::ofstream os(dir / "ragged.bin", std::ios::binary);
        os << "123456789";  // not a multiple of 16
    }
    CHECK_THROWS_AS(load_kitti_bin(dir / "ragged.bin"), FormatError);
}

TEST_CASE("token file round trip") {
    const auto dir = testutil::temp_dir("tok");
    const std::vector<std::vector<double>> tokens = {{1.0, 2.5, -3.0}, {0.0, 0.25, 9.0}};
    save_tokens(tokens, dir / "t.tok");
    const auto back = load_tokens(dir / "t.tok");
    REQUIRE(back.size() == 2);
    REQUIRE(back[0].size() == 3);
    for (size_t i = 0; i < 2; ++i)
        for (size_t j = 0; j < 3; ++j)
            CHECK(back[i][j] == static_cast<double>(static_cast<float>(tokens[i][j])));

    CHECK_THROWS_AS(load_tokens(dir / "absent.tok"), IoError);
}

TEST_CASE("fnv1a64 known value and file hashing") {
    CHECK(fnv1a64("abc", 3) == 0xe71fa2190541574bULL);
    const auto dir = testutil::temp_dir("fnv");
    {
        std::ofstream os(dir / "f.txt", std::ios::binary);
        os << "abc";
    }
    CHECK(fnv1a64_file(dir / "f.txt") == 0xe71fa2190541574bULL);
}

TEST_CASE("run config parsing") {
    const RunConfig defaults;
    CHECK(defaults.get_int("ae.f_c") == 2);
    CHECK(defaults.get_int("ae.f_p") == 4);
    CHECK(defaults.get_int("ae.latent_dim") == 8);
    CHECK(defaults.get_int("ae.codebook_size") == 16384);
    CHECK(defaults.get_int("dm.timesteps") == 1000);
    CHECK(defaults.get_double("dm.beta_start") == doctest::Approx(1e-4));
    CHECK(defaults.get_int("metrics.partitions") == 16);
    CHECK(defaults.get("metrics.agg") == "depth");

    const auto dir = testutil::temp_dir("cfg");
    {
        std::ofstream os(dir / "run.cfg");
        os << "# comment line\n";
        os << "ae.f_c = 4   # trailing comment\n";
        os << "\n";
        os << "dm.ddim_eta = 1.0\n";
        os << "synth.ground = false\n";
        os << "dm.channel_mults = 1,2\n";
    }
    const RunConfig cfg = RunConfig::from_file(dir / "run.cfg");
    CHECK(cfg.get_int("ae.f_c") == 4);
    CHECK(cfg.get_double("dm.ddim_eta") == 1.0);
    CHECK(cfg.get_bool("synth.ground") == false);
    CHECK(cfg.get_int_list("dm.channel_mults") == std::vector<int>{1, 2});
    CHECK(cfg.get_int("ae.f_p") == 4);  // untouched default

    {
        std::ofstream os(dir / "unknown.cfg");
        os << "nonexistent.key = 3\n";
    }
    CHECK_THROWS_AS(RunConfig::from_file(dir / "unknown.cfg"), ConfigError);
    {
        std::ofstream os(dir / "badnum.cfg");
        os << "ae.f_c = banana\n";
    }
    CHECK_THROWS_AS(RunConfig::from_file(dir / "badnum.cfg").get_int("ae.f_c"), ConfigError);
    {
        std::ofstream os(dir / "noeq.cfg");
        os << "just some words\n";
    }
    CHECK_THROWS_AS(RunConfig::from_file(dir / "noeq.cfg"), ConfigError);

    // Every key is documented with its default.
    const std::string doc = RunConfig::dump_documentation();
    for (const auto& line : {"ae.lambda_coord", "dm.ddim_steps", "sensor.beams", "workers"})
        CHECK(doc.find(line) != std::string::npos);
    CHECK(defaults.dump().find("ae.f_c = 2") != std::string::npos);
}

TEST_CASE("sensor config invariants") {
    const SensorConfig c64 = SensorConfig::beams64();
    CHECK(c64.height == 64);
    CHECK(c64.width == 1024);
    CHECK(c64.fov_up_deg == 3.0);
    CHECK(c64.fov_down_deg == -25.0);
    CHECK(c64.max_range == doctest::Approx(std::exp2(5.84) - 1.0).epsilon(1e-6));

    const SensorConfig c32 = SensorConfig::beams32();
    CHECK(c32.height == 32);
    CHECK(c32.fov_up_deg == 10.0);
    CHECK(c32.omega == doctest::Approx(5.53).epsilon(1e-7));

    CHECK_THROWS_AS(SensorConfig::custom(0, 8, 3, -25, 5.84), ConfigError);
    CHECK_THROWS_AS(SensorConfig::custom(8, 8, -25, 3, 5.84), ConfigError);
    CHECK_THROWS_AS(SensorConfig::custom(8, 8, 3, -25, -1.0), ConfigError);
}
