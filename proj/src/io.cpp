#include "rangegen/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "rangegen/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

namespace rangegen {

namespace {

template <typename T>
void write_raw(std::ofstream& os, const T& value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& is, const std::filesystem::path& path) {
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) throw FormatError("truncated file: " + path.string());
    return value;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    return is;
}

}  // namespace

RangeImage load_lri(const std::filesystem::path& path) {
    std::ifstream is = open_in(path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "LRI1", 4) != 0)
        throw FormatError("bad LRI1 magic: " + path.string());
    const auto h = read_raw<uint32_t>(is, path);
    const auto w = read_raw<uint32_t>(is, path);
    const auto fov_up = read_raw<float>(is, path);
    const auto fov_down = read_raw<float>(is, path);
    const auto omega = read_raw<float>(is, path);
    const auto max_range = read_raw<float>(is, path);
    if (h == 0 || w == 0 || h > 1u << 16 || w > 1u << 20)
        throw FormatError("implausible LRI1 dimensions: " + path.string());

    SensorConfig cfg;
    try {
        cfg = SensorConfig::custom(static_cast<int>(h), static_cast<int>(w), fov_up, fov_down,
                                   omega);
    } catch (const ConfigError& e) {
        throw FormatError("invalid LRI1 sensor header in " + path.string() + ": " + e.what());
    }
    if (std::abs(max_range - static_cast<float>(cfg.max_range)) > 1e-3f * cfg.max_range)
        throw FormatError("LRI1 max_range does not match 2^omega - 1: " + path.string());

    RangeImage img(cfg);
    is.read(reinterpret_cast<char*>(img.depth.data()),
            static_cast<std::streamsize>(img.depth.size() * sizeof(float)));
    if (!is) throw FormatError("truncated LRI1 payload: " + path.string());
    for (float d : img.depth) {
        if (!(d == -1.0f || (d >= 0.0f && d <= static_cast<float>(cfg.max_range) * 1.0001f)))
            throw FormatError("LRI1 depth outside [0, max_range] and not the -1 sentinel: " +
                              path.string());
    }
    return img;
}

void save_lri(const RangeImage& img, const std::filesystem::path& path) {
    std::ofstream os = open_out(path);
    os.write("LRI1", 4);
    write_raw<uint32_t>(os, static_cast<uint32_t>(img.cfg.height));
    write_raw<uint32_t>(os, static_cast<uint32_t>(img.cfg.width));
    write_raw<float>(os, static_cast<float>(img.cfg.fov_up_deg));
    write_raw<float>(os, static_cast<float>(img.cfg.fov_down_deg));
    write_raw<float>(os, static_cast<float>(img.cfg.omega));
    write_raw<float>(os, static_cast<float>(img.cfg.max_range));
    os.write(reinterpret_cast<const char*>(img.depth.data()),
             static_cast<std::streamsize>(img.depth.size() * sizeof(float)));
    if (!os) throw IoError("write failed: " + path.string());
}

PointCloud load_kitti_bin(const std::filesystem::path& path) {
    std::ifstream is = open_in(path);
    is.seekg(0, std::ios::end);
    const auto bytes = static_cast<size_t>(is.tellg());
    is.seekg(0);
    if (bytes % 16 != 0)
        throw FormatError("point file size not a multiple of 16 bytes: " + path.string());
    const size_t n = bytes / 16;
    std::vector<float> raw(n * 4);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
    if (!is) throw FormatError("truncated point file: " + path.string());

    PointCloud cloud;
    cloud.points.resize(n);
    cloud.intensity.resize(n);
    for (size_t i = 0; i < n; ++i) {
        cloud.points[i] = {raw[i * 4 + 0], raw[i * 4 + 1], raw[i * 4 + 2]};
        cloud.intensity[i] = raw[i * 4 + 3];
    }
    return cloud;
}

void save_kitti_bin(const PointCloud& cloud, const std::filesystem::path& path) {
    std::ofstream os = open_out(path);
    for (size_t i = 0; i < cloud.points.size(); ++i) {
        const float rec[4] = {static_cast<float>(cloud.points[i].x),
                              static_cast<float>(cloud.points[i].y),
                              static_cast<float>(cloud.points[i].z),
                              i < cloud.intensity.size() ? cloud.intensity[i] : 0.0f};
        os.write(reinterpret_cast<const char*>(rec), sizeof(rec));
    }
    if (!os) throw IoError("write failed: " + path.string());
}

std::vector<std::vector<double>> load_tokens(const std::filesystem::path& path) {
    std::ifstream is = open_in(path);
    const auto count = read_raw<uint32_t>(is, path);
    const auto dim = read_raw<uint32_t>(is, path);
    if (dim == 0 || dim > 1u << 16) throw FormatError("bad token dimension: " + path.string());
    std::vector<std::vector<double>> tokens(count, std::vector<double>(dim));
    std::vector<float> row(dim);
    for (auto& token : tokens) {
        is.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(dim * sizeof(float)));
        if (!is) throw FormatError("truncated token file: " + path.string());
        std::copy(row.begin(), row.end(), token.begin());
    }
    return tokens;
}

void save_tokens(const std::vector<std::vector<double>>& tokens,
                 const std::filesystem::path& path) {
    std::ofstream os = open_out(path);
    write_raw<uint32_t>(os, static_cast<uint32_t>(tokens.size()));
    const uint32_t dim = tokens.empty() ? 0 : static_cast<uint32_t>(tokens.front().size());
    write_raw<uint32_t>(os, dim);
    for (const auto& token : tokens) {
        if (token.size() != dim) throw DataError("token dimensions differ");
        for (double v : token) write_raw<float>(os, static_cast<float>(v));
    }
    if (!os) throw IoError("write failed: " + path.string());
}

uint64_t fnv1a64(const void* data, size_t size) {
    const auto* bytes = static_cast<const uint8_t*>(data);
    uint64_t hash = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < size; ++i) {
        hash ^= bytes[i];
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

uint64_t fnv1a64_file(const std::filesystem::path& path) {
    std::ifstream is = open_in(path);
    uint64_t hash = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof(buf));
        const auto got = is.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            hash ^= static_cast<uint8_t>(buf[i]);
            hash *= 0x100000001b3ULL;
        }
    }
    return hash;
}

std::vector<std::filesystem::path> list_lri_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir))
        throw IoError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".lri")
            files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

void save_pgm(const RangeImage& img, const std::filesystem::path& path) {
    std::ofstream os = open_out(path);
    os << "P5\n" << img.cfg.width << " " << img.cfg.height << "\n255\n";
    for (int r = 0; r < img.cfg.height; ++r) {
        for (int c = 0; c < img.cfg.width; ++c) {
            double v = 0.0;
            if (img.valid(r, c)) v = encode_depth(img.at(r, c), img.cfg);
            os.put(static_cast<char>(std::clamp(v, 0.0, 1.0) * 255.0));
        }
    }
    if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace rangegen
