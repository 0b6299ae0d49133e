#include "rangegen/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "rangegen/errors.hpp"

namespace rangegen {

namespace {

void write_u32(std::ofstream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void write_u64(std::ofstream& os, uint64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }

void write_string(std::ofstream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t read_u32(std::ifstream& is, const std::filesystem::path& p) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw FormatError("truncated checkpoint: " + p.string());
    return v;
}

uint64_t read_u64(std::ifstream& is, const std::filesystem::path& p) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw FormatError("truncated checkpoint: " + p.string());
    return v;
}

std::string read_string(std::ifstream& is, const std::filesystem::path& p) {
    const uint32_t len = read_u32(is, p);
    if (len > (1u << 20)) throw FormatError("implausible string length in " + p.string());
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw FormatError("truncated checkpoint: " + p.string());
    return s;
}

}  // namespace

const nn::Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return &t;
    return nullptr;
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
    for (const auto& [n, t] : arrays)
        if (n.rfind(prefix, 0) == 0) return true;
    return false;
}

void Checkpoint::restore_params(nn::ParamStore& store, const std::string& prefix) const {
    for (const auto& [name, param] : store.entries()) {
        const nn::Tensor* stored = find(prefix + name);
        if (!stored)
            throw CheckpointMismatchError("checkpoint missing parameter: " + prefix + name);
        if (stored->shape() != param.shape())
            throw CheckpointMismatchError("checkpoint shape mismatch for: " + prefix + name);
        nn::Tensor dst = param;
        std::memcpy(dst.data(), stored->data(), sizeof(double) * stored->numel());
    }
}

void Checkpoint::add_params(const nn::ParamStore& store, const std::string& prefix) {
    for (const auto& [name, t] : store.entries()) arrays.emplace_back(prefix + name, t);
}

void Checkpoint::add_array(const std::string& name, const nn::Tensor& t) {
    arrays.emplace_back(name, t);
}

void Checkpoint::add_adam(const nn::Adam& opt, const nn::ParamStore& store,
                          const std::string& prefix) {
    config[prefix + "adam.t"] = std::to_string(opt.t);
    const auto& entries = store.entries();
    for (size_t i = 0; i < opt.m.size() && i < entries.size(); ++i) {
        arrays.emplace_back(prefix + "adam.m." + entries[i].first,
                            nn::Tensor::from_data({static_cast<int>(opt.m[i].size())},
                                                  std::vector<double>(opt.m[i])));
        arrays.emplace_back(prefix + "adam.v." + entries[i].first,
                            nn::Tensor::from_data({static_cast<int>(opt.v[i].size())},
                                                  std::vector<double>(opt.v[i])));
    }
}

void Checkpoint::restore_adam(nn::Adam& opt, const nn::ParamStore& store,
                              const std::string& prefix) const {
    const auto it = config.find(prefix + "adam.t");
    if (it == config.end()) return;  // optimizer state absent: fresh start
    opt.t = std::stoll(it->second);
    if (opt.t == 0) {
        opt.m.clear();
        opt.v.clear();
        return;
    }
    const auto& entries = store.entries();
    opt.m.resize(entries.size());
    opt.v.resize(entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        const nn::Tensor* m = find(prefix + "adam.m." + entries[i].first);
        const nn::Tensor* v = find(prefix + "adam.v." + entries[i].first);
        if (!m || !v)
            throw CheckpointMismatchError("checkpoint missing optimizer state for: " +
                                          entries[i].first);
        opt.m[i].assign(m->data(), m->data() + m->numel());
        opt.v[i].assign(v->data(), v->data() + v->numel());
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open for writing: " + tmp.string());
        os.write("RGCK", 4);
        write_u32(os, 1);  // version

        write_u32(os, static_cast<uint32_t>(ckpt.config.size()));
        for (const auto& [k, v] : ckpt.config) {
            write_string(os, k);
            write_string(os, v);
        }

        write_u32(os, static_cast<uint32_t>(ckpt.arrays.size()));
        for (const auto& [name, t] : ckpt.arrays) {
            write_string(os, name);
            write_u32(os, static_cast<uint32_t>(t.shape().size()));
            for (int d : t.shape()) write_u32(os, static_cast<uint32_t>(d));
            for (int64_t i = 0; i < t.numel(); ++i) {
                const float f = static_cast<float>(t.data()[i]);
                os.write(reinterpret_cast<const char*>(&f), 4);
            }
        }
        for (uint64_t w : ckpt.rng_state) write_u64(os, w);
        write_u64(os, ckpt.step);
        if (!os) throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RGCK", 4) != 0)
        throw FormatError("bad checkpoint magic: " + path.string());
    const uint32_t version = read_u32(is, path);
    if (version != 1) throw FormatError("unsupported checkpoint version: " + path.string());

    Checkpoint ckpt;
    const uint32_t n_config = read_u32(is, path);
    for (uint32_t i = 0; i < n_config; ++i) {
        std::string k = read_string(is, path);
        ckpt.config[k] = read_string(is, path);
    }
    const uint32_t n_arrays = read_u32(is, path);
    for (uint32_t i = 0; i < n_arrays; ++i) {
        std::string name = read_string(is, path);
        const uint32_t ndim = read_u32(is, path);
        if (ndim > 8) throw FormatError("implausible array rank in " + path.string());
        nn::Shape shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(read_u32(is, path));
        const int64_t numel = nn::numel_of(shape);
        std::vector<float> raw(numel);
        is.read(reinterpret_cast<char*>(raw.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        if (!is) throw FormatError("truncated checkpoint array: " + path.string());
        std::vector<double> data(raw.begin(), raw.end());
        ckpt.arrays.emplace_back(name, nn::Tensor::from_data(shape, std::move(data)));
    }
    for (uint64_t& w : ckpt.rng_state) w = read_u64(is, path);
    ckpt.step = read_u64(is, path);
    return ckpt;
}

}  // namespace rangegen
