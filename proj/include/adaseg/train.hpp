#pragma once

#include <cstdint>

#include <json.hpp>

#include "adaseg/checkpoint.hpp"
#include "adaseg/data.hpp"
#include "adaseg/losses.hpp"

namespace adaseg {

struct TrainConfig {
    real lambda = 1.0;   // BCE weight in the combined loss
    real lr_max = 1e-4;  // cosine schedule endpoints (stepped per epoch)
    real lr_min = 1e-5;
    real momentum = 0.9;  // Adam beta1
    long batch_size = 8;
    long epochs = 1;
    std::uint64_t seed = 0;
    real eps_dice = 1e-6;
    BceMode bce_mode = BceMode::Sigmoid;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// Trains an Adaptive UNet on the source dataset: per batch the frozen DPG
// encodes each image into a domain code, the model runs in batch-stats mode,
// and Adam minimizes lambda*BCE + Dice. Only the UNet weights are updated.
Checkpoint train_source(const Checkpoint& model, const Checkpoint& dpg,
                        const DatasetManifest& dataset, const TrainConfig& cfg);

// Baseline recipe: identical loop for a plain-BN UNet, no DPG involved.
Checkpoint train_plain(const Checkpoint& model, const DatasetManifest& dataset,
                       const TrainConfig& cfg);

// Writes the checkpoint's recorded loss curve as CSV (epoch, mean_loss, lr).
void write_loss_curve_csv(const Checkpoint& ckpt, const std::filesystem::path& path);

}  // namespace adaseg
