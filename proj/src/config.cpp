#include "adaseg/config.hpp"

#include <chrono>
#include <fstream>

#include "adaseg/common.hpp"

namespace adaseg {

namespace {

void deep_merge(nlohmann::json& base, const nlohmann::json& over) {
    if (!over.is_object() || !base.is_object()) {
        base = over;
        return;
    }
    for (auto it = over.begin(); it != over.end(); ++it) {
        if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object())
            deep_merge(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
}

}  // namespace

nlohmann::json ExperimentConfig::defaults() {
    nlohmann::json j;
    j["experiment_name"] = "desk";
    j["seed"] = 17;
    j["output_dir"] = "runs/desk";
    j["data"] = {{"source", ""}, {"target", ""}, {"dpg_corpus", nlohmann::json::array()}};
    j["synth"] = {{"n_train", 200},
                  {"n_test", 50},
                  {"size", {64, 64}},
                  {"num_classes", 2},
                  {"target_shift", "strong"},
                  {"corpus",
                   {{"n_train", 50}, {"n_test", 10}, {"domains", {"identity", "mild", "strong"}}}}};
    j["arch"] = ArchConfig{}.to_json();
    j["dpg"] = DPGConfig{}.to_json();
    j["train"] = TrainConfig{}.to_json();
    j["tent"] = TentConfig{}.to_json();
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    cfg.doc = defaults();
    deep_merge(cfg.doc, j);
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open config " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw validation_error("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

std::string ExperimentConfig::experiment_name() const {
    return doc.value("experiment_name", std::string("desk"));
}

std::uint64_t ExperimentConfig::seed() const { return doc.value("seed", std::uint64_t(17)); }

std::filesystem::path ExperimentConfig::output_dir() const {
    const std::string d = doc.value("output_dir", std::string());
    if (d.empty()) throw validation_error("config: output_dir is required");
    return d;
}

ArchConfig ExperimentConfig::arch(NormKind norm_override) const {
    nlohmann::json a = doc.value("arch", nlohmann::json::object());
    a["norm"] = norm_kind_name(norm_override);
    if (norm_override == NormKind::AdaBN &&
        (!a.contains("code_channels") || a["code_channels"].get<long>() <= 0))
        a["code_channels"] = dpg().code_channels;
    return ArchConfig::from_json(a);
}

DPGConfig ExperimentConfig::dpg() const {
    return DPGConfig::from_json(doc.value("dpg", nlohmann::json::object()));
}

TrainConfig ExperimentConfig::train() const {
    nlohmann::json t = doc.value("train", nlohmann::json::object());
    if (!t.contains("seed")) t["seed"] = seed();
    return TrainConfig::from_json(t);
}

TentConfig ExperimentConfig::tent() const {
    return TentConfig::from_json(doc.value("tent", nlohmann::json::object()));
}

std::filesystem::path ExperimentConfig::source_dataset() const {
    const std::string p = doc["data"].value("source", std::string());
    if (p.empty()) throw validation_error("config: data.source is required");
    return p;
}

std::filesystem::path ExperimentConfig::target_dataset() const {
    const std::string p = doc["data"].value("target", std::string());
    if (p.empty()) throw validation_error("config: data.target is required");
    return p;
}

std::vector<std::filesystem::path> ExperimentConfig::dpg_corpus() const {
    std::vector<std::filesystem::path> out;
    for (const auto& p : doc["data"].value("dpg_corpus", nlohmann::json::array()))
        out.push_back(p.get<std::string>());
    return out;
}

std::string ExperimentConfig::config_hash() const {
    const std::string canon = doc.dump();  // nlohmann objects iterate sorted keys
    return hex64(fnv1a(canon.data(), canon.size()));
}

void write_provenance(const std::filesystem::path& dir, const std::string& command,
                      const ExperimentConfig& cfg, const nlohmann::json& extra) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["command"] = command;
    j["config_hash"] = cfg.config_hash();
    j["seed"] = cfg.seed();
    j["experiment_name"] = cfg.experiment_name();
    const auto now = std::chrono::system_clock::now();
    j["timestamp_unix"] =
        std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
    j["details"] = extra;
    std::ofstream f(dir / (command + "_provenance.json"), std::ios::trunc);
    if (!f) throw io_error("cannot write provenance record in " + dir.string());
    f << j.dump(2) << "\n";
}

}  // namespace adaseg
