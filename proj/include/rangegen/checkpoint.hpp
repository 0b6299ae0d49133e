#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rangegen/nn/modules.hpp"

namespace rangegen {

/// Self-describing training-state container ("RGCK"): a key=value config
/// block, named f32 parameter arrays, optimizer moments, the RNG state and
/// the step counter. Parameters are kept on the f32 grid during training, so
/// save followed by load reproduces the in-memory state bit for bit.
struct Checkpoint {
    std::map<std::string, std::string> config;
    std::vector<std::pair<std::string, nn::Tensor>> arrays;  // values stored as f32
    std::array<uint64_t, 4> rng_state{};
    uint64_t step = 0;

    const nn::Tensor* find(const std::string& name) const;
    bool has_prefix(const std::string& prefix) const;

    /// Copies stored values into a live ParamStore; every store entry must be
    /// present with a matching shape (CheckpointMismatchError otherwise).
    void restore_params(nn::ParamStore& store, const std::string& prefix = "") const;

    void add_params(const nn::ParamStore& store, const std::string& prefix = "");
    void add_array(const std::string& name, const nn::Tensor& t);
    void add_adam(const nn::Adam& opt, const nn::ParamStore& store, const std::string& prefix);
    void restore_adam(nn::Adam& opt, const nn::ParamStore& store,
                      const std::string& prefix) const;
};

/// Atomic write (tmp file + rename).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rangegen
