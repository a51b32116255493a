#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaseg/baselines.hpp"
#include "adaseg/data.hpp"
#include "adaseg/dpg.hpp"
#include "adaseg/model.hpp"
#include "adaseg/train.hpp"

namespace adaseg {

// Experiment configuration: one JSON document with a section per module.
// CLI flags override config keys, which override built-in defaults.
struct ExperimentConfig {
    nlohmann::json doc;

    std::string experiment_name() const;
    std::uint64_t seed() const;
    std::filesystem::path output_dir() const;

    ArchConfig arch(NormKind norm_override) const;
    DPGConfig dpg() const;
    TrainConfig train() const;  // seed defaults to the global seed
    TentConfig tent() const;

    std::filesystem::path source_dataset() const;
    std::filesystem::path target_dataset() const;
    std::vector<std::filesystem::path> dpg_corpus() const;

    // Hash of the canonical serialization (sorted keys).
    std::string config_hash() const;

    static nlohmann::json defaults();
    static ExperimentConfig load(const std::filesystem::path& path);
    static ExperimentConfig from_json(const nlohmann::json& j);
};

void write_provenance(const std::filesystem::path& dir, const std::string& command,
                      const ExperimentConfig& cfg, const nlohmann::json& extra);

}  // namespace adaseg
