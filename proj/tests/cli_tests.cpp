// End-to-end CLI tests: every command is exercised as a subprocess against
// the documented exit codes and determinism guarantees.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "rangegen/io.hpp"

using namespace rangegen;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path log =
        fs::temp_directory_path() / ("rangegen_cli_" + std::to_string(::getpid()) + "_" +
                                     std::to_string(counter++) + ".log");
    const std::string cmd =
        std::string(RANGEGEN_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult res;
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream is(log);
    std::stringstream ss;
    ss << is.rdbuf();
    res.output = ss.str();
    fs::remove(log);
    return res;
}

std::string value_of(const std::string& report, const std::string& key) {
    std::istringstream is(report);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find(" = ");
        if (eq != std::string::npos && line.substr(0, eq) == key)
            return line.substr(eq + 3);
    }
    return "";
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Small custom sensor + tiny nets so trainings run in seconds.
void write_tiny_config(const fs::path& path) {
    std::ofstream os(path);
    os << "sensor.beams = custom\n"
       << "sensor.height = 8\n"
       << "sensor.width = 64\n"
       << "sensor.fov_up_deg = 3.0\n"
       << "sensor.fov_down_deg = -25.0\n"
       << "sensor.omega = 5.84\n"
       << "ae.f_c = 2\n"
       << "ae.f_p = 2\n"
       << "ae.latent_dim = 3\n"
       << "ae.codebook_size = 32\n"
       << "ae.base_channels = 8\n"
       << "ae.num_res_blocks = 1\n"
       << "ae.gan_weight = 0.0\n"
       << "ae.batch_size = 1\n"
       << "dm.timesteps = 40\n"
       << "dm.ddim_steps = 10\n"
       << "dm.beta_end = 0.1\n"
       << "dm.base_channels = 8\n"
       << "dm.channel_mults = 1,2\n"
       << "dm.batch_size = 2\n";
}

struct Workspace {
    fs::path dir = testutil::temp_dir("cli");
    fs::path config;

    Workspace() {
        config = dir / "tiny.cfg";
        write_tiny_config(config);
    }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("synth: determinism, manifest, beams presets") {
    Workspace ws;

    const RunResult a = run_cli("synth --count 3 --seed 5 --config " + ws.config.string() +
                                " --out " + ws.path("s1"));
    REQUIRE(a.exit_code == 0);
    const std::string manifest1 = read_file(ws.dir / "s1" / "manifest.txt");
    CHECK(std::count(manifest1.begin(), manifest1.end(), '\n') == 3);

    const RunResult b = run_cli("synth --count 3 --seed 5 --config " + ws.config.string() +
                                " --out " + ws.path("s2"));
    REQUIRE(b.exit_code == 0);
    CHECK(read_file(ws.dir / "s2" / "manifest.txt") == manifest1);

    // A different seed changes the hashes.
    run_cli("synth --count 3 --seed 6 --config " + ws.config.string() + " --out " +
            ws.path("s3"));
    CHECK(read_file(ws.dir / "s3" / "manifest.txt") != manifest1);

    SUBCASE("count 0 writes an empty manifest") {
        const RunResult r = run_cli("synth --count 0 --out " + ws.path("empty") +
                                    " --config " + ws.config.string());
        CHECK(r.exit_code == 0);
        CHECK(read_file(ws.dir / "empty" / "manifest.txt").empty());
    }

    SUBCASE("beams presets set the file geometry") {
        const RunResult r =
            run_cli("synth --count 1 --seed 1 --beams 64 --out " + ws.path("b64"));
        REQUIRE(r.exit_code == 0);
        const RangeImage img = load_lri(ws.dir / "b64" / "scene_00000.lri");
        CHECK(img.cfg.height == 64);
        CHECK(img.cfg.width == 1024);

        const RunResult r32 =
            run_cli("synth --count 1 --seed 1 --beams 32 --out " + ws.path("b32"));
        REQUIRE(r32.exit_code == 0);
        CHECK(load_lri(ws.dir / "b32" / "scene_00000.lri").cfg.height == 32);
    }

    SUBCASE("unwritable output path exits 2") {
        const RunResult r = run_cli("synth --count 1 --out /dev/null/nope");
        CHECK(r.exit_code == 2);
    }

    SUBCASE("bin export writes point files alongside") {
        const RunResult r = run_cli("synth --count 1 --seed 2 --bin --config " +
                                    ws.config.string() + " --out " + ws.path("withbin"));
        REQUIRE(r.exit_code == 0);
        CHECK(fs::exists(ws.dir / "withbin" / "scene_00000.bin"));
    }
}

TEST_CASE("convert: round trips, counts, and format errors") {
    Workspace ws;
    REQUIRE(run_cli("synth --count 2 --seed 7 --config " + ws.config.string() + " --out " +
                    ws.path("src"))
                .exit_code == 0);

    const RunResult to_bin = run_cli("convert --in " + ws.path("src") + " --out " +
                                     ws.path("bins") + " --to bin");
    REQUIRE(to_bin.exit_code == 0);
    CHECK(value_of(to_bin.output, "converted") == "2");

    const RunResult to_lri = run_cli("convert --in " + ws.path("bins") + " --out " +
                                     ws.path("back") + " --to lri --config " +
                                     ws.config.string());
    REQUIRE(to_lri.exit_code == 0);
    CHECK(value_of(to_lri.output, "dropped_out_of_fov") == "0");

    // The f32 .bin records reproduce validity and indices exactly and every
    // depth within one f32 ulp (the format cannot carry more).
    for (const char* name : {"scene_00000.lri", "scene_00001.lri"}) {
        const RangeImage a = load_lri(ws.dir / "src" / name);
        const RangeImage b = load_lri(ws.dir / "back" / name);
        REQUIRE(a.cfg == b.cfg);
        size_t exact = 0;
        for (size_t i = 0; i < a.depth.size(); ++i) {
            REQUIRE((a.depth[i] < 0) == (b.depth[i] < 0));
            if (a.depth[i] < 0) continue;
            exact += a.depth[i] == b.depth[i];
            CHECK(std::abs(a.depth[i] - b.depth[i]) <=
                  std::abs(std::nextafterf(a.depth[i], 1e9f) - a.depth[i]));
        }
        CHECK(exact > a.valid_count() * 95 / 100);
    }

    SUBCASE("truncated input exits 3 and names the file") {
        {
            std::ofstream os(ws.dir / "src" / "broken.lri", std::ios::binary);
            os << "LRI1xx";
        }
        const RunResult r = run_cli("convert --in " + ws.path("src") + "/broken.lri --out " +
                                    ws.path("junk") + " --to bin");
        CHECK(r.exit_code == 3);
        CHECK(r.output.find("broken.lri") != std::string::npos);
    }

    SUBCASE("empty input directory is a no-op success") {
        fs::create_directories(ws.dir / "none");
        const RunResult r = run_cli("convert --in " + ws.path("none") + " --out " +
                                    ws.path("none_out") + " --to bin");
        CHECK(r.exit_code == 0);
        CHECK(value_of(r.output, "converted") == "0");
    }

    SUBCASE("missing input path exits 2") {
        CHECK(run_cli("convert --in /nonexistent/dir --out " + ws.path("x") + " --to bin")
                  .exit_code == 2);
    }
}

TEST_CASE("train-ae: steps, csv, resume determinism") {
    Workspace ws;
    REQUIRE(run_cli("synth --count 2 --seed 1 --config " + ws.config.string() + " --out " +
                    ws.path("data"))
                .exit_code == 0);

    SUBCASE("--steps 0 checkpoints the initial state") {
        const RunResult r = run_cli("train-ae --data " + ws.path("data") + " --config " +
                                    ws.config.string() + " --steps 0 --seed 4 --out " +
                                    ws.path("ae0.ckpt"));
        REQUIRE(r.exit_code == 0);
        CHECK(fs::exists(ws.dir / "ae0.ckpt"));
        const std::string csv = read_file(ws.dir / "ae0.ckpt.csv");
        CHECK(csv == "step,total,l1,coord,mask,vq,perceptual,g_loss,d_loss\n");
    }

    SUBCASE("csv row count equals steps; resume matches the straight run") {
        const std::string base = "train-ae --data " + ws.path("data") + " --config " +
                                 ws.config.string() + " --seed 4 ";
        REQUIRE(run_cli(base + "--steps 8 --out " + ws.path("ae_full.ckpt")).exit_code == 0);
        const std::string full_csv = read_file(ws.dir / "ae_full.ckpt.csv");
        CHECK(std::count(full_csv.begin(), full_csv.end(), '\n') == 9);  // header + 8 rows

        REQUIRE(run_cli(base + "--steps 4 --out " + ws.path("ae_head.ckpt")).exit_code == 0);
        REQUIRE(run_cli(base + "--steps 8 --resume " + ws.path("ae_head.ckpt") + " --out " +
                        ws.path("ae_resumed.ckpt"))
                    .exit_code == 0);
        CHECK(fnv1a64_file(ws.dir / "ae_resumed.ckpt") ==
              fnv1a64_file(ws.dir / "ae_full.ckpt"));
    }

    SUBCASE("empty data directory exits 6") {
        fs::create_directories(ws.dir / "nodata");
        CHECK(run_cli("train-ae --data " + ws.path("nodata") + " --out " +
                      ws.path("x.ckpt"))
                  .exit_code == 6);
    }
}

TEST_CASE("full pipeline: train both stages, sample, eval, bench") {
    Workspace ws;
    REQUIRE(run_cli("synth --count 3 --seed 2 --config " + ws.config.string() + " --out " +
                    ws.path("data"))
                .exit_code == 0);
    REQUIRE(run_cli("train-ae --data " + ws.path("data") + " --config " + ws.config.string() +
                    " --steps 10 --seed 3 --out " + ws.path("ae.ckpt"))
                .exit_code == 0);

    const std::string dm_base = "train-dm --data " + ws.path("data") + " --ae " +
                                ws.path("ae.ckpt") + " --config " + ws.config.string() +
                                " --seed 5 ";
    REQUIRE(run_cli(dm_base + "--steps 10 --out " + ws.path("dm.ckpt")).exit_code == 0);

    SUBCASE("train-dm resume matches the straight run") {
        REQUIRE(run_cli(dm_base + "--steps 5 --out " + ws.path("dm_head.ckpt")).exit_code ==
                0);
        REQUIRE(run_cli(dm_base + "--steps 10 --resume " + ws.path("dm_head.ckpt") +
                        " --out " + ws.path("dm_resumed.ckpt"))
                    .exit_code == 0);
        CHECK(fnv1a64_file(ws.dir / "dm_resumed.ckpt") == fnv1a64_file(ws.dir / "dm.ckpt"));
    }

    SUBCASE("train-dm with a non-ae checkpoint exits 5") {
        CHECK(run_cli("train-dm --data " + ws.path("data") + " --ae " + ws.path("dm.ckpt") +
                      " --config " + ws.config.string() + " --steps 1 --out " +
                      ws.path("x.ckpt"))
                  .exit_code == 5);
    }

    SUBCASE("sampling is seeded-deterministic and in-contract") {
        const std::string cmd = "sample --checkpoint " + ws.path("dm.ckpt") +
                                " --count 2 --steps 10 --eta 0 --seed 9 --out ";
        REQUIRE(run_cli(cmd + ws.path("gen1")).exit_code == 0);
        REQUIRE(run_cli(cmd + ws.path("gen2")).exit_code == 0);
        for (const char* name : {"sample_00000.lri", "sample_00001.lri"}) {
            CHECK(fnv1a64_file(ws.dir / "gen1" / name) ==
                  fnv1a64_file(ws.dir / "gen2" / name));
            const RangeImage img = load_lri(ws.dir / "gen1" / name);  // validates invariants
            CHECK(img.cfg.height == 8);
            for (float d : img.depth)
                CHECK((d == -1.0f || (d >= 0.0f && d <= img.cfg.max_range * 1.0001f)));
        }

        // The ddpm sampler is also exposed.
        CHECK(run_cli("sample --checkpoint " + ws.path("dm.ckpt") +
                      " --count 1 --sampler ddpm --seed 3 --out " + ws.path("gen_ddpm"))
                  .exit_code == 0);
    }

    SUBCASE("sampling from an autoencoder checkpoint exits 5") {
        CHECK(run_cli("sample --checkpoint " + ws.path("ae.ckpt") + " --count 1 --out " +
                      ws.path("nogen"))
                  .exit_code == 5);
    }

    SUBCASE("conditional sampling consumes token files") {
        save_tokens({{0.5, -0.25, 1.0, 0.0, 0.25, -1.0}}, ws.dir / "views.tok");
        // The unconditional model ignores tokens; the command still succeeds.
        CHECK(run_cli("sample --checkpoint " + ws.path("dm.ckpt") +
                      " --count 1 --steps 5 --seed 1 --cond-tokens " +
                      (ws.dir / "views.tok").string() + " --out " + ws.path("gen_tok"))
                  .exit_code == 0);
    }

    SUBCASE("eval: identical sets score zero; reports are stable") {
        const std::string eval_cmd = "eval --ref " + ws.path("data") + " --gen " +
                                     ws.path("data") + " --partitions 4 ";
        const RunResult jsd_run = run_cli(eval_cmd + "--metric jsd");
        REQUIRE(jsd_run.exit_code == 0);
        CHECK(value_of(jsd_run.output, "value") == "0");

        const RunResult frid_run = run_cli(eval_cmd + "--metric frid");
        REQUIRE(frid_run.exit_code == 0);
        CHECK(std::stod(value_of(frid_run.output, "value")) <= 1e-8);
        CHECK(run_cli(eval_cmd + "--metric frid").output == frid_run.output);

        const RunResult cd_run = run_cli(eval_cmd + "--metric cd");
        REQUIRE(cd_run.exit_code == 0);
        CHECK(value_of(cd_run.output, "value") == "0");

        const RunResult mmd_run = run_cli(eval_cmd + "--metric mmd");
        REQUIRE(mmd_run.exit_code == 0);
        CHECK(value_of(mmd_run.output, "value") == "0");

        const RunResult fsvd_run = run_cli(eval_cmd + "--metric fsvd");
        REQUIRE(fsvd_run.exit_code == 0);
        CHECK(std::stod(value_of(fsvd_run.output, "value")) <= 1e-8);
    }

    SUBCASE("eval with generated scenes and a stats cache") {
        REQUIRE(run_cli("sample --checkpoint " + ws.path("dm.ckpt") +
                        " --count 2 --steps 10 --seed 4 --out " + ws.path("gen"))
                    .exit_code == 0);
        const std::string cache = ws.path("ref.lfs");
        const std::string cmd = "eval --metric frid --ref " + ws.path("data") + " --gen " +
                                ws.path("gen") + " --partitions 4 --stats-cache " + cache;
        const RunResult first = run_cli(cmd);
        REQUIRE(first.exit_code == 0);
        CHECK(value_of(first.output, "ref_stats_from_cache") == "false");
        REQUIRE(fs::exists(cache));
        const RunResult second = run_cli(cmd);
        REQUIRE(second.exit_code == 0);
        CHECK(value_of(second.output, "ref_stats_from_cache") == "true");
        CHECK(value_of(second.output, "value") == value_of(first.output, "value"));
    }

    SUBCASE("eval failure modes") {
        CHECK(run_cli("eval --metric jsd --ref /nonexistent --gen " + ws.path("data"))
                  .exit_code == 2);
        // One usable scene is not enough for a Frechet metric.
        fs::create_directories(ws.dir / "one");
        fs::copy_file(ws.dir / "data" / "scene_00000.lri", ws.dir / "one" / "only.lri");
        CHECK(run_cli("eval --metric frid --ref " + ws.path("one") + " --gen " +
                      ws.path("data") + " --partitions 4")
                  .exit_code == 6);
        CHECK(run_cli("eval --metric nope --ref " + ws.path("data") + " --gen " +
                      ws.path("data"))
                  .exit_code == 3);
    }

    SUBCASE("bench reports throughput") {
        const RunResult r = run_cli("bench --checkpoint " + ws.path("dm.ckpt") +
                                    " --count 2 --steps 5 --seed 1");
        REQUIRE(r.exit_code == 0);
        CHECK(std::stod(value_of(r.output, "samples_per_sec")) > 0.0);
        CHECK(std::stod(value_of(r.output, "steps_per_sec")) > 0.0);
    }
}

TEST_CASE("curves subcommand prints a report") {
    Workspace ws;
    REQUIRE(run_cli("synth --count 1 --seed 3 --config " + ws.config.string() + " --out " +
                    ws.path("c"))
                .exit_code == 0);
    const RunResult r = run_cli("curves --in " + ws.path("c") + "/scene_00000.lri");
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("curves = ") != std::string::npos);
    CHECK(r.output.find("valid_pixels = ") != std::string::npos);
}

TEST_CASE("config subcommand documents every key") {
    const RunResult r = run_cli("config");
    REQUIRE(r.exit_code == 0);
    for (const char* key : {"sensor.beams", "ae.f_c", "dm.timesteps", "metrics.partitions"})
        CHECK(r.output.find(key) != std::string::npos);
}

TEST_CASE("malformed config file exits 3") {
    Workspace ws;
    {
        std::ofstream os(ws.dir / "bad.cfg");
        os << "unknown.key = 1\n";
    }
    CHECK(run_cli("synth --count 1 --config " + (ws.dir / "bad.cfg").string() + " --out " +
                  ws.path("x"))
              .exit_code == 3);
}
