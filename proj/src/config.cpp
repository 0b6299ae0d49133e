#include "rangegen/config.hpp"

#include <fstream>
#include <sstream>

#include "rangegen/errors.hpp"

namespace rangegen {

namespace {

struct KeyDef {
    const char* key;
    const char* value;
    const char* doc;
};

// The single source of truth for configuration keys.
const std::vector<KeyDef>& key_defs() {
    static const std::vector<KeyDef> defs = {
        {"sensor.beams", "64", "sensor preset: 32, 64, or custom"},
        {"sensor.height", "64", "beam count H (custom preset only)"},
        {"sensor.width", "1024", "azimuth resolution W (custom preset only)"},
        {"sensor.fov_up_deg", "3.0", "upper fov bound in degrees (custom preset only)"},
        {"sensor.fov_down_deg", "-25.0", "lower fov bound in degrees (custom preset only)"},
        {"sensor.omega", "5.84", "log-depth scale; max range is 2^omega - 1 (custom preset only)"},

        {"synth.min_boxes", "2", "minimum box count per scene"},
        {"synth.max_boxes", "6", "maximum box count per scene"},
        {"synth.min_cylinders", "1", "minimum cylinder count per scene"},
        {"synth.max_cylinders", "4", "maximum cylinder count per scene"},
        {"synth.min_walls", "1", "minimum wall count per scene"},
        {"synth.max_walls", "3", "maximum wall count per scene"},
        {"synth.radius_min", "3.0", "minimum primitive placement radius in meters"},
        {"synth.radius_max", "30.0", "maximum primitive placement radius in meters"},
        {"synth.ground", "true", "include the ground plane"},
        {"synth.ground_height", "-1.73", "ground plane height relative to the sensor"},
        {"synth.depth_noise_std", "0.0", "Gaussian depth jitter in meters, 0 disables"},

        {"ae.f_c", "2", "curve-wise horizontal downsampling factor (power of two)"},
        {"ae.f_p", "4", "patch-wise downsampling factor (power of two)"},
        {"ae.latent_dim", "8", "latent channels"},
        {"ae.codebook_size", "16384", "vector-quantization codebook entries"},
        {"ae.base_channels", "32", "channel width of the first stage"},
        {"ae.num_res_blocks", "2", "residual blocks per stage"},
        {"ae.lambda_coord", "0.1", "weight of the point-coordinate reconstruction term"},
        {"ae.lambda_mask", "1.0", "weight of the validity-mask reconstruction term"},
        {"ae.gan_weight", "0.5", "weight of the adversarial generator term"},
        {"ae.gan_start_step", "1000", "step at which adversarial training engages"},
        {"ae.gan_loss", "vanilla", "adversarial loss form: vanilla or hinge"},
        {"ae.beta_commit", "0.25", "commitment coefficient of the VQ loss"},
        {"ae.codebook_reseed_interval", "1000", "steps between dead-codebook-entry reseeds"},
        {"ae.perceptual_weight", "0.0", "weight of the perceptual feature-matching term"},
        {"ae.perceptual_taps", "final", "perceptual taps: encoder, decoder, all, or final"},
        {"ae.lr", "1e-3", "autoencoder Adam learning rate"},
        {"ae.disc_lr", "1e-3", "discriminator Adam learning rate"},
        {"ae.batch_size", "2", "scenes per training step"},

        {"dm.timesteps", "1000", "diffusion steps T"},
        {"dm.beta_start", "1e-4", "linear noise schedule start"},
        {"dm.beta_end", "2e-2", "linear noise schedule end"},
        {"dm.sampler", "ddim", "default sampler: ddpm or ddim"},
        {"dm.ddim_steps", "50", "DDIM sampling steps"},
        {"dm.ddim_eta", "0.0", "DDIM stochasticity (0 = deterministic)"},
        {"dm.condition_mode", "none", "none, concat_image, or cross_attention_tokens"},
        {"dm.cond_classes", "4", "semantic-map vocabulary size for concat_image"},
        {"dm.token_dim", "16", "token embedding dimension for cross attention"},
        {"dm.base_channels", "64", "UNet base channel width"},
        {"dm.channel_mults", "1,2,4", "UNet per-level channel multipliers"},
        {"dm.lr", "1e-3", "diffusion Adam learning rate"},
        {"dm.batch_size", "4", "latents per training step"},

        {"metrics.partitions", "16", "partition count P for feature aggregation"},
        {"metrics.agg", "depth", "partition mode: depth (rows/rings) or angle (columns/sectors)"},
        {"metrics.extractor", "toy-range", "feature extractor: toy-range, toy-voxel, or external"},
        {"metrics.extractor_seed", "7", "seed of the frozen toy extractor weights"},
        {"metrics.voxel_size", "0.5", "voxel edge length for volume extractors"},
        {"metrics.emd_cap", "1024", "maximum point count for the exact EMD solver"},
        {"metrics.emd_approx", "false", "allow entropic EMD approximation beyond the cap"},

        {"workers", "1", "worker threads; 1 guarantees bit-stable output"},
    };
    return defs;
}

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

}  // namespace

RunConfig::RunConfig() {
    for (const KeyDef& def : key_defs()) values_[def.key] = def.value;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path.string());
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                              ": expected key = value");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) != 0; }

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
}

double RunConfig::get_double(const std::string& key) const {
    const std::string& s = get(key);
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected a number, got '" + s + "'");
    }
}

int RunConfig::get_int(const std::string& key) const {
    const long long v = get_i64(key);
    return static_cast<int>(v);
}

long long RunConfig::get_i64(const std::string& key) const {
    const std::string& s = get(key);
    try {
        size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected an integer, got '" + s + "'");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key " + key + ": expected a boolean, got '" + s + "'");
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
    const std::string& s = get(key);
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(trim(item)));
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": expected a comma-separated integer list");
        }
    }
    if (out.empty()) throw ConfigError("config key " + key + ": empty list");
    return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key: " + key);
    values_[key] = value;
}

std::string RunConfig::dump() const {
    std::ostringstream os;
    for (const auto& [key, value] : values_) os << key << " = " << value << "\n";
    return os.str();
}

std::string RunConfig::dump_documentation() {
    std::ostringstream os;
    for (const KeyDef& def : key_defs())
        os << def.key << " = " << def.value << "  # " << def.doc << "\n";
    return os.str();
}

}  // namespace rangegen
