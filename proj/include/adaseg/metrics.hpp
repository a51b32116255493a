#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaseg/tensor.hpp"

namespace adaseg {

// 2|P n G| / (|P| + |G|) for one class id over integer masks.
// Both sets empty -> 1.0; exactly one empty -> 0.0.
real dice_score(const ByteTensor& pred, const ByteTensor& gt, int class_id);

// Named label-set unions (e.g. BraTS WT/TC/ET). Order is preserved in reports.
struct RegionSpec {
    std::vector<std::pair<std::string, std::vector<int>>> regions;
};

std::map<std::string, real> region_dice(const ByteTensor& pred, const ByteTensor& gt,
                                        const RegionSpec& spec, long num_classes);

struct DiceReport {
    std::string method;
    long num_classes = 0;
    // instance id -> Dice per foreground class (classes 1..num_classes-1)
    std::vector<std::pair<std::string, std::vector<real>>> per_instance;
    std::vector<real> per_class_mean;  // length num_classes-1
    real mean_dice = 0;
    std::map<std::string, real> region_scores;  // optional
    nlohmann::json metadata;

    void finalize();  // recomputes the aggregates from per_instance
    nlohmann::json to_json() const;
    static DiceReport from_json(const nlohmann::json& j);
};

enum class ReportFormat { Json, Csv, Markdown };

void emit_report(const DiceReport& report, const std::filesystem::path& path, ReportFormat fmt);
DiceReport load_report(const std::filesystem::path& path);

// Tables-2/3-style grid: one row per method (direct first, oracle last), one
// column per run label; cells are mean Dice, missing combinations are dashes.
void emit_comparison_markdown(
    const std::vector<std::pair<std::string, DiceReport>>& labeled_reports,
    const std::filesystem::path& path);
std::string comparison_markdown(
    const std::vector<std::pair<std::string, DiceReport>>& labeled_reports);

// Shared scoring path used by episodic evaluation and every baseline:
// per-instance per-foreground-class Dice, then unweighted instance mean.
DiceReport score_predictions(const std::vector<std::pair<std::string, ByteTensor>>& predictions,
                             const std::vector<ByteTensor>& ground_truth, long num_classes,
                             const std::string& method, const nlohmann::json& metadata);

}  // namespace adaseg
