#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adaseg/tensor.hpp"

namespace adaseg {

// A checkpoint is a directory: manifest.json (arch config, fingerprints,
// metadata, tensor table) plus weights.bin holding the named tensors as
// little-endian float32, concatenated in table order.
struct Checkpoint {
    std::string kind;  // "adaptive_unet" | "plain_unet" | "dpg_autoencoder"
    nlohmann::json arch;
    std::string dpg_fingerprint;  // empty when none
    nlohmann::json metadata;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
    // Hash over names, shapes and the float32 payload; stable across a
    // save/load round trip.
    std::string fingerprint() const;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace adaseg
