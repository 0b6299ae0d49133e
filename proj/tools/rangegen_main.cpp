// rangegen: synthesis, conversion, training, sampling and evaluation of
// LiDAR range-image generative models.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>

#include "CLI11.hpp"
#include "rangegen/checkpoint.hpp"
#include "rangegen/compression.hpp"
#include "rangegen/config.hpp"
#include "rangegen/curves.hpp"
#include "rangegen/diffusion.hpp"
#include "rangegen/errors.hpp"
#include "rangegen/io.hpp"
#include "rangegen/metrics.hpp"
#include "rangegen/synth.hpp"

namespace fs = std::filesystem;
using namespace rangegen;

namespace {

// Exit codes: 0 success, 2 I/O, 3 format/config, 4 divergence,
// 5 checkpoint mismatch, 6 insufficient data.
constexpr int kExitIo = 2;
constexpr int kExitFormat = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitCheckpoint = 5;
constexpr int kExitInsufficient = 6;

RunConfig load_config(const std::string& path) {
    return path.empty() ? RunConfig() : RunConfig::from_file(path);
}

SensorConfig sensor_from(const RunConfig& rc, const std::string& beams_flag) {
    const std::string beams = beams_flag.empty() ? rc.get("sensor.beams") : beams_flag;
    if (beams == "32") return SensorConfig::beams32();
    if (beams == "64") return SensorConfig::beams64();
    if (beams == "custom")
        return SensorConfig::custom(rc.get_int("sensor.height"), rc.get_int("sensor.width"),
                                    rc.get_double("sensor.fov_up_deg"),
                                    rc.get_double("sensor.fov_down_deg"),
                                    rc.get_double("sensor.omega"));
    throw ConfigError("sensor.beams must be 32, 64, or custom");
}

SceneParams scene_params_from(const RunConfig& rc) {
    SceneParams params;
    params.min_boxes = rc.get_int("synth.min_boxes");
    params.max_boxes = rc.get_int("synth.max_boxes");
    params.min_cylinders = rc.get_int("synth.min_cylinders");
    params.max_cylinders = rc.get_int("synth.max_cylinders");
    params.min_walls = rc.get_int("synth.min_walls");
    params.max_walls = rc.get_int("synth.max_walls");
    params.placement_radius_min = rc.get_double("synth.radius_min");
    params.placement_radius_max = rc.get_double("synth.radius_max");
    params.ground = rc.get_bool("synth.ground");
    params.ground_height = rc.get_double("synth.ground_height");
    params.depth_noise_std = rc.get_double("synth.depth_noise_std");
    return params;
}

uint64_t scene_seed(uint64_t run_seed, uint64_t index) {
    return run_seed * 0x9e3779b97f4a7c15ULL + index * 0xbf58476d1ce4e5b9ULL + 1;
}

std::vector<RangeImage> load_dataset(const fs::path& dir) {
    std::vector<RangeImage> dataset;
    for (const fs::path& file : list_lri_files(dir)) dataset.push_back(load_lri(file));
    if (dataset.empty()) throw InsufficientDataError("no .lri files in " + dir.string());
    for (const RangeImage& img : dataset)
        if (!(img.cfg == dataset.front().cfg))
            throw FormatError("dataset mixes sensor configurations: " + dir.string());
    return dataset;
}

std::string hex64(uint64_t v) {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

int cmd_synth(const std::string& config_path, uint64_t seed, int count,
              const std::string& beams, const std::string& out, bool export_bin, int workers) {
    const RunConfig rc = load_config(config_path);
    const SensorConfig sensor = sensor_from(rc, beams);
    const SceneParams params = scene_params_from(rc);

    std::error_code ec;
    fs::create_directories(out, ec);
    std::ofstream manifest(fs::path(out) / "manifest.txt");
    if (!manifest) throw IoError("cannot write manifest in " + out);

    for (int i = 0; i < count; ++i) {
        const SceneSpec scene = make_random_scene(scene_seed(seed, i), params);
        const RangeImage img = raycast(scene, sensor, workers);
        char name[32];
        snprintf(name, sizeof(name), "scene_%05d.lri", i);
        const fs::path path = fs::path(out) / name;
        save_lri(img, path);
        manifest << name << " " << hex64(fnv1a64_file(path)) << "\n";
        if (export_bin) {
            fs::path bin_path = path;
            bin_path.replace_extension(".bin");
            save_kitti_bin(unproject(img), bin_path);
        }
    }
    manifest.close();
    std::cout << "scenes = " << count << "\n"
              << "out = " << out << "\n"
              << "manifest = " << (fs::path(out) / "manifest.txt").string() << "\n";
    return 0;
}

int cmd_convert(const std::string& in, const std::string& out, const std::string& to,
                const std::string& config_path, const std::string& beams) {
    const RunConfig rc = load_config(config_path);
    std::error_code ec;
    fs::create_directories(out, ec);

    std::vector<fs::path> inputs;
    const std::string want_ext = to == "lri" ? ".bin" : ".lri";
    if (fs::is_directory(in)) {
        for (const auto& entry : fs::directory_iterator(in))
            if (entry.is_regular_file() && entry.path().extension() == want_ext)
                inputs.push_back(entry.path());
        std::sort(inputs.begin(), inputs.end());
    } else if (fs::exists(in)) {
        inputs.push_back(in);
    } else {
        throw IoError("input path does not exist: " + in);
    }

    uint64_t dropped = 0, clamped = 0, converted = 0;
    for (const fs::path& src : inputs) {
        fs::path dst = fs::path(out) / src.filename();
        if (to == "lri") {
            const PointCloud cloud = load_kitti_bin(src);
            const SensorConfig sensor = sensor_from(rc, beams);
            const ProjectResult proj = project(cloud, sensor);
            dropped += proj.dropped_out_of_fov;
            clamped += proj.clamped_ranges;
            dst.replace_extension(".lri");
            save_lri(proj.image, dst);
        } else if (to == "bin") {
            const RangeImage img = load_lri(src);
            dst.replace_extension(".bin");
            save_kitti_bin(unproject(img), dst);
        } else {
            throw ConfigError("--to must be lri or bin");
        }
        ++converted;
    }
    std::cout << "converted = " << converted << "\n"
              << "dropped_out_of_fov = " << dropped << "\n"
              << "clamped_ranges = " << clamped << "\n";
    return 0;
}

int cmd_train_ae(const std::string& config_path, const std::string& data,
                 const std::string& out, const std::string& csv, long long steps,
                 uint64_t seed, const std::string& resume, bool verbose) {
    const RunConfig rc = load_config(config_path);
    const std::vector<RangeImage> dataset = load_dataset(data);
    const CompressionConfig cfg = CompressionConfig::from_config(rc);

    AeTrainOptions opts;
    opts.steps = steps;
    opts.seed = seed;
    opts.checkpoint_path = out;
    opts.csv_path = csv.empty() ? out + ".csv" : csv;
    if (!resume.empty()) opts.resume_from = resume;
    opts.quiet = !verbose;

    const AeTrainResult res = train_autoencoder(dataset, cfg, dataset.front().cfg, opts);
    std::cout << "checkpoint = " << out << "\n"
              << "steps = " << res.final_step << "\n"
              << "loss = " << res.final_loss << "\n"
              << "l1 = " << res.final_l1 << "\n";
    return 0;
}

int cmd_train_dm(const std::string& config_path, const std::string& data,
                 const std::string& ae_path, const std::string& out, const std::string& csv,
                 long long steps, uint64_t seed, const std::string& resume, bool verbose) {
    const RunConfig rc = load_config(config_path);
    const std::vector<RangeImage> dataset = load_dataset(data);
    const Checkpoint ae_ckpt = load_checkpoint(ae_path);
    if (!ae_ckpt.config.count("kind") || ae_ckpt.config.at("kind") != "autoencoder")
        throw CheckpointMismatchError("--ae must point to an autoencoder checkpoint");
    Autoencoder ae = autoencoder_from_checkpoint(ae_ckpt);
    if (!(ae.sensor() == dataset.front().cfg))
        throw CheckpointMismatchError("autoencoder sensor does not match the dataset");

    std::vector<nn::Tensor> latents;
    {
        nn::NoGradGuard no_grad;
        for (const RangeImage& img : dataset) latents.push_back(ae.encode_image(img));
    }

    DiffusionConfig cfg = DiffusionConfig::from_config(rc);
    DmTrainOptions opts;
    opts.steps = steps;
    opts.seed = seed;
    opts.checkpoint_path = out;
    opts.csv_path = csv.empty() ? out + ".csv" : csv;
    if (!resume.empty()) opts.resume_from = resume;
    opts.quiet = !verbose;

    const DmTrainResult res = train_diffusion(latents, cfg, ae_ckpt, opts);
    std::cout << "checkpoint = " << out << "\n"
              << "steps = " << res.final_step << "\n"
              << "loss = " << res.final_loss << "\n"
              << "latent_std = " << res.latent_std << "\n";
    return 0;
}

struct LoadedSampler {
    Autoencoder ae;
    DenoiserUNet unet;
    Schedule schedule;
    double latent_std;
    nn::Shape latent_shape;
};

LoadedSampler load_sampler(const std::string& checkpoint_path) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    if (!ckpt.config.count("kind") || ckpt.config.at("kind") != "diffusion")
        throw CheckpointMismatchError("sample: checkpoint is not a diffusion model");
    Autoencoder ae = autoencoder_from_checkpoint(ckpt, "ae/");
    DiffusionConfig cfg = diffusion_from_checkpoint(ckpt);
    DenoiserUNet unet(cfg, ae.config().latent_dim, 0);
    ckpt.restore_params(unet.params());
    const double latent_std = std::stod(ckpt.config.at("dm.latent_std"));
    const nn::Shape shape = {ae.config().latent_dim,
                             ae.config().latent_height(ae.sensor().height),
                             ae.config().latent_width(ae.sensor().width)};
    return {std::move(ae), std::move(unet), make_schedule(cfg), latent_std, shape};
}

ConditionInput load_condition(const LoadedSampler& s, const std::string& cond_map_dir,
                              const std::string& cond_tokens, int sample_index) {
    ConditionInput ctx;
    if (!cond_tokens.empty()) ctx.tokens = embed_views(load_tokens(cond_tokens));
    if (!cond_map_dir.empty()) {
        // Per-sample class-id map stored as raw bytes (one id per pixel,
        // row-major H*W), files sorted lexicographically.
        std::vector<fs::path> maps;
        for (const auto& entry : fs::directory_iterator(cond_map_dir))
            if (entry.is_regular_file()) maps.push_back(entry.path());
        std::sort(maps.begin(), maps.end());
        if (maps.empty()) throw InsufficientDataError("no condition maps in " + cond_map_dir);
        const fs::path& path = maps[sample_index % maps.size()];
        std::ifstream is(path, std::ios::binary);
        const int height = s.ae.sensor().height, width = s.ae.sensor().width;
        std::vector<char> raw(static_cast<size_t>(height) * width);
        is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
        if (!is) throw FormatError("condition map too small: " + path.string());
        std::vector<int> ids(raw.size());
        for (size_t i = 0; i < raw.size(); ++i) ids[i] = static_cast<unsigned char>(raw[i]);
        ctx.image_map = encode_condition_map(ids, height, width, s.unet.config().cond_classes,
                                             s.ae.config().f_c, s.ae.config().f_p);
    }
    return ctx;
}

int cmd_sample(const std::string& checkpoint_path, int count, int steps, double eta,
               uint64_t seed, const std::string& out, const std::string& sampler,
               const std::string& cond_map_dir, const std::string& cond_tokens) {
    LoadedSampler s = load_sampler(checkpoint_path);
    std::error_code ec;
    fs::create_directories(out, ec);

    for (int i = 0; i < count; ++i) {
        const ConditionInput ctx = load_condition(s, cond_map_dir, cond_tokens, i);
        std::vector<nn::Tensor> latents;
        if (sampler == "ddpm")
            latents = sample_ddpm(s.unet, s.schedule, 1, ctx, seed + static_cast<uint64_t>(i),
                                  s.latent_shape);
        else
            latents = sample_ddim(s.unet, s.schedule, 1, steps, eta, ctx,
                                  seed + static_cast<uint64_t>(i), s.latent_shape);
        nn::Tensor z = latents.front();
        for (int64_t j = 0; j < z.numel(); ++j) z.data()[j] *= s.latent_std;
        nn::NoGradGuard no_grad;
        const Autoencoder::Decoded dec = s.ae.decode(z);
        const RangeImage img = s.ae.image_from_output(dec.v_hat, dec.m_hat);
        char name[32];
        snprintf(name, sizeof(name), "sample_%05d.lri", i);
        save_lri(img, fs::path(out) / name);
    }
    std::cout << "samples = " << count << "\n"
              << "out = " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& metric, const std::string& ref, const std::string& gen,
             int partitions, const std::string& agg, const std::string& extractor_name,
             const std::string& stats_cache, const std::string& config_path, int workers) {
    const RunConfig rc = load_config(config_path);
    const std::vector<fs::path> ref_files = list_lri_files(ref);
    const std::vector<fs::path> gen_files = list_lri_files(gen);
    if (ref_files.empty() || gen_files.empty())
        throw InsufficientDataError("eval: empty scene directory");

    const auto load_clouds = [](const std::vector<fs::path>& files) {
        std::vector<PointCloud> clouds;
        for (const fs::path& f : files) clouds.push_back(unproject(load_lri(f)));
        return clouds;
    };

    double value = 0.0;
    size_t ref_count = ref_files.size(), gen_count = gen_files.size();
    std::string extra;

    if (metric == "jsd") {
        value = jsd(load_clouds(ref_files), load_clouds(gen_files));
    } else if (metric == "mmd") {
        value = mmd(load_clouds(ref_files), load_clouds(gen_files));
    } else if (metric == "cd" || metric == "emd") {
        if (ref_files.size() != gen_files.size())
            throw InsufficientDataError("pairwise metrics need equally sized directories");
        EmdOptions emd_opts;
        emd_opts.exact_cap = static_cast<size_t>(rc.get_i64("metrics.emd_cap"));
        emd_opts.allow_approx = rc.get_bool("metrics.emd_approx");
        double acc = 0.0, gap = 0.0;
        for (size_t i = 0; i < ref_files.size(); ++i) {
            const PointCloud a = unproject(load_lri(ref_files[i]));
            const PointCloud b = unproject(load_lri(gen_files[i]));
            if (metric == "cd") {
                acc += chamfer(a, b);
            } else {
                const EmdResult r = emd(a, b, emd_opts);
                acc += r.value;
                gap += r.duality_gap;
            }
        }
        value = acc / static_cast<double>(ref_files.size());
        if (metric == "emd") extra = "duality_gap = " + std::to_string(gap) + "\n";
    } else if (metric == "frid" || metric == "fsvd" || metric == "fpvd") {
        std::unique_ptr<FeatureExtractor> extractor;
        if (extractor_name == "external") {
            extractor = std::make_unique<ExternalFeatureExtractor>();
        } else if (metric == "frid") {
            extractor = std::make_unique<ToyRangeExtractor>(
                static_cast<uint64_t>(rc.get_i64("metrics.extractor_seed")));
        } else {
            extractor = std::make_unique<ToyVoxelExtractor>(
                metric == "fsvd" ? FeatureExtractor::Modality::sparse_volume
                                 : FeatureExtractor::Modality::point_volume,
                rc.get_double("metrics.voxel_size"));
        }
        FrPipelineOptions opts;
        opts.partitions = partitions;
        opts.mode = agg == "angle" ? AggregationMode::angle : AggregationMode::depth;
        opts.workers = workers;
        if (!stats_cache.empty()) opts.ref_stats_cache = stats_cache;
        const FrPipelineResult res = fr_pipeline(ref_files, gen_files, *extractor, opts);
        value = res.value;
        ref_count = res.ref_scenes;
        gen_count = res.gen_scenes;
        extra = "extractor = " + extractor->name() + "\n" +
                "empty_partitions = " + std::to_string(res.empty_partitions) + "\n" +
                "failed_files = " + std::to_string(res.failed_files) + "\n" +
                "ref_stats_from_cache = " + (res.ref_stats_from_cache ? "true" : "false") +
                "\n";
    } else {
        throw ConfigError("unknown metric: " + metric);
    }

    std::cout << "metric = " << metric << "\n"
              << "value = " << std::setprecision(12) << value << "\n"
              << "ref_scenes = " << ref_count << "\n"
              << "gen_scenes = " << gen_count << "\n"
              << "partitions = " << partitions << "\n"
              << "agg = " << agg << "\n"
              << extra;
    return 0;
}

int cmd_curves(const std::string& in) {
    const RangeImage img = load_lri(in);
    std::cout << format_curve_report(curve_stats(extract_curves(img)));
    return 0;
}

int cmd_bench(const std::string& checkpoint_path, int count, int steps, uint64_t seed) {
    LoadedSampler s = load_sampler(checkpoint_path);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<nn::Tensor> latents =
        sample_ddim(s.unet, s.schedule, count, steps, 0.0, {}, seed, s.latent_shape);
    const auto t1 = std::chrono::steady_clock::now();
    {
        nn::NoGradGuard no_grad;
        for (nn::Tensor& z : latents) {
            for (int64_t j = 0; j < z.numel(); ++j) z.data()[j] *= s.latent_std;
            const Autoencoder::Decoded dec = s.ae.decode(z);
            (void)s.ae.image_from_output(dec.v_hat, dec.m_hat);
        }
    }
    const auto t2 = std::chrono::steady_clock::now();
    const double denoise_sec = std::chrono::duration<double>(t1 - t0).count();
    const double total_sec = std::chrono::duration<double>(t2 - t0).count();
    std::cout << "count = " << count << "\n"
              << "steps = " << steps << "\n"
              << "diffusion_sec = " << denoise_sec << "\n"
              << "total_sec = " << total_sec << "\n"
              << "samples_per_sec = " << count / total_sec << "\n"
              << "steps_per_sec = " << static_cast<double>(count) * steps / denoise_sec
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LiDAR range-image synthesis, compression and diffusion toolkit"};
    app.require_subcommand(1);

    std::string config_path, beams, in, out = "out", to = "lri", data, resume, csv;
    std::string checkpoint, ref, gen, metric = "jsd", agg = "depth", extractor = "toy-range";
    std::string stats_cache, cond_map, cond_tokens, sampler = "ddim";
    uint64_t seed = 0;
    int count = 1, steps_i = 50, partitions = 16, workers = 1;
    long long train_steps = 1000;
    double eta = 0.0;
    bool export_bin = false, verbose = false;

    auto* synth = app.add_subcommand("synth", "generate synthetic scenes as LRI1 files");
    synth->add_option("--config", config_path);
    synth->add_option("--seed", seed);
    synth->add_option("--count", count);
    synth->add_option("--beams", beams, "32, 64, or custom");
    synth->add_option("--out", out);
    synth->add_flag("--bin", export_bin, "also export KITTI-style .bin clouds");
    synth->add_option("--workers", workers);

    auto* convert = app.add_subcommand("convert", "convert between .lri and .bin");
    convert->add_option("--in", in)->required();
    convert->add_option("--out", out);
    convert->add_option("--to", to, "lri or bin")->required();
    convert->add_option("--config", config_path);
    convert->add_option("--beams", beams);

    auto* train_ae = app.add_subcommand("train-ae", "train the compression autoencoder");
    train_ae->add_option("--config", config_path);
    train_ae->add_option("--data", data)->required();
    train_ae->add_option("--out", out)->required();
    train_ae->add_option("--csv", csv);
    train_ae->add_option("--steps", train_steps);
    train_ae->add_option("--seed", seed);
    train_ae->add_option("--resume", resume);
    train_ae->add_flag("--verbose", verbose);
    train_ae->add_option("--workers", workers);

    auto* train_dm = app.add_subcommand("train-dm", "train the latent diffusion model");
    train_dm->add_option("--config", config_path);
    train_dm->add_option("--data", data)->required();
    train_dm->add_option("--ae", checkpoint, "autoencoder checkpoint")->required();
    train_dm->add_option("--out", out)->required();
    train_dm->add_option("--csv", csv);
    train_dm->add_option("--steps", train_steps);
    train_dm->add_option("--seed", seed);
    train_dm->add_option("--resume", resume);
    train_dm->add_flag("--verbose", verbose);
    train_dm->add_option("--workers", workers);

    auto* sample = app.add_subcommand("sample", "draw scenes from a trained model");
    sample->add_option("--checkpoint", checkpoint)->required();
    sample->add_option("--count", count);
    sample->add_option("--steps", steps_i);
    sample->add_option("--eta", eta);
    sample->add_option("--seed", seed);
    sample->add_option("--out", out);
    sample->add_option("--sampler", sampler, "ddim or ddpm");
    sample->add_option("--cond-map", cond_map, "directory of class-id maps");
    sample->add_option("--cond-tokens", cond_tokens, "token file");
    sample->add_option("--workers", workers);

    auto* eval = app.add_subcommand("eval", "evaluate generated scenes against a reference");
    eval->add_option("--metric", metric, "jsd, mmd, cd, emd, frid, fsvd, fpvd")->required();
    eval->add_option("--ref", ref)->required();
    eval->add_option("--gen", gen)->required();
    eval->add_option("--partitions", partitions);
    eval->add_option("--agg", agg, "depth or angle");
    eval->add_option("--extractor", extractor, "toy-range, toy-voxel, or external");
    eval->add_option("--stats-cache", stats_cache);
    eval->add_option("--config", config_path);
    eval->add_option("--workers", workers);

    auto* curves = app.add_subcommand("curves", "print the curve statistics of a range image");
    curves->add_option("--in", in)->required();

    auto* bench = app.add_subcommand("bench", "measure sampling throughput");
    bench->add_option("--checkpoint", checkpoint)->required();
    bench->add_option("--count", count);
    bench->add_option("--steps", steps_i);
    bench->add_option("--seed", seed);

    auto* config_doc = app.add_subcommand("config", "print all config keys with defaults");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed())
            return cmd_synth(config_path, seed, count, beams, out, export_bin, workers);
        if (convert->parsed()) return cmd_convert(in, out, to, config_path, beams);
        if (train_ae->parsed())
            return cmd_train_ae(config_path, data, out, csv, train_steps, seed, resume,
                                verbose);
        if (train_dm->parsed())
            return cmd_train_dm(config_path, data, checkpoint, out, csv, train_steps, seed,
                                resume, verbose);
        if (sample->parsed())
            return cmd_sample(checkpoint, count, steps_i, eta, seed, out, sampler, cond_map,
                              cond_tokens);
        if (eval->parsed())
            return cmd_eval(metric, ref, gen, partitions, agg, extractor, stats_cache,
                            config_path, workers);
        if (curves->parsed()) return cmd_curves(in);
        if (bench->parsed()) return cmd_bench(checkpoint, count, steps_i, seed);
        if (config_doc->parsed()) {
            std::cout << RunConfig::dump_documentation();
            return 0;
        }
    } catch (const CheckpointMismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckpoint;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const InsufficientDataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInsufficient;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
