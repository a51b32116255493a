#include "adaseg/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "adaseg/common.hpp"

namespace adaseg {

real dice_score(const ByteTensor& pred, const ByteTensor& gt, int class_id) {
    if (!pred.same_shape(gt))
        throw shape_error("dice_score: mask shapes differ " + shape_str(pred.shape) + " vs " +
                          shape_str(gt.shape));
    long p = 0, g = 0, inter = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool in_p = pred.data[i] == class_id;
        const bool in_g = gt.data[i] == class_id;
        p += in_p;
        g += in_g;
        inter += in_p && in_g;
    }
    if (p + g == 0) return real(1);  // both-empty convention
    return real(2) * static_cast<real>(inter) / static_cast<real>(p + g);
}

std::map<std::string, real> region_dice(const ByteTensor& pred, const ByteTensor& gt,
                                        const RegionSpec& spec, long num_classes) {
    if (!pred.same_shape(gt)) throw shape_error("region_dice: mask shapes differ");
    std::map<std::string, real> out;
    for (const auto& [name, labels] : spec.regions) {
        if (labels.empty())
            throw validation_error("region_dice: region '" + name + "' has an empty label set");
        std::vector<char> member(static_cast<std::size_t>(num_classes), 0);
        for (int l : labels) {
            if (l < 0 || l >= num_classes)
                throw validation_error("region_dice: region '" + name + "' references label " +
                                       std::to_string(l) + " outside [0, " +
                                       std::to_string(num_classes) + ")");
            member[static_cast<std::size_t>(l)] = 1;
        }
        long p = 0, g = 0, inter = 0;
        for (std::size_t i = 0; i < pred.data.size(); ++i) {
            const bool in_p = pred.data[i] < num_classes && member[pred.data[i]];
            const bool in_g = gt.data[i] < num_classes && member[gt.data[i]];
            p += in_p;
            g += in_g;
            inter += in_p && in_g;
        }
        out[name] = (p + g == 0) ? real(1) : real(2) * static_cast<real>(inter) /
                                                 static_cast<real>(p + g);
    }
    return out;
}

void DiceReport::finalize() {
    const long k = num_classes - 1;
    per_class_mean.assign(static_cast<std::size_t>(k), real(0));
    if (per_instance.empty()) {
        mean_dice = 0;
        return;
    }
    for (const auto& [id, dices] : per_instance) {
        if (static_cast<long>(dices.size()) != k)
            throw validation_error("DiceReport: instance " + id + " carries " +
                                   std::to_string(dices.size()) + " class scores, expected " +
                                   std::to_string(k));
        for (long c = 0; c < k; ++c) per_class_mean[static_cast<std::size_t>(c)] += dices[c];
    }
    for (auto& v : per_class_mean) v /= static_cast<real>(per_instance.size());
    mean_dice = std::accumulate(per_class_mean.begin(), per_class_mean.end(), real(0)) /
                static_cast<real>(std::max<long>(k, 1));
}

nlohmann::json DiceReport::to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["method"] = method;
    j["num_classes"] = num_classes;
    nlohmann::json inst = nlohmann::json::array();
    for (const auto& [id, dices] : per_instance) {
        nlohmann::json row;
        row["id"] = id;
        row["dice"] = dices;
        inst.push_back(row);
    }
    j["per_instance"] = inst;
    j["per_class_mean"] = per_class_mean;
    j["mean_dice"] = mean_dice;
    if (!region_scores.empty()) j["region_scores"] = region_scores;
    j["metadata"] = metadata;
    return j;
}

DiceReport DiceReport::from_json(const nlohmann::json& j) {
    DiceReport r;
    r.method = j.at("method").get<std::string>();
    r.num_classes = j.at("num_classes").get<long>();
    for (const auto& row : j.at("per_instance"))
        r.per_instance.emplace_back(row.at("id").get<std::string>(),
                                    row.at("dice").get<std::vector<real>>());
    r.per_class_mean = j.at("per_class_mean").get<std::vector<real>>();
    r.mean_dice = j.at("mean_dice").get<real>();
    if (j.contains("region_scores"))
        r.region_scores = j["region_scores"].get<std::map<std::string, real>>();
    r.metadata = j.value("metadata", nlohmann::json::object());
    return r;
}

void emit_report(const DiceReport& report, const std::filesystem::path& path, ReportFormat fmt) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write report to " + path.string());
    switch (fmt) {
        case ReportFormat::Json:
            f << report.to_json().dump(2) << "\n";
            break;
        case ReportFormat::Csv: {
            f << "instance_id,class_id,dice\n";
            for (const auto& [id, dices] : report.per_instance)
                for (std::size_t c = 0; c < dices.size(); ++c)
                    f << id << "," << (c + 1) << "," << dices[c] << "\n";
            break;
        }
        case ReportFormat::Markdown: {
            f << comparison_markdown({{report.metadata.value("dataset", std::string("run")),
                                       report}});
            break;
        }
    }
    if (!f) throw io_error("write failed: " + path.string());
}

DiceReport load_report(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open report " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("corrupt report " + path.string() + ": " + e.what());
    }
    return DiceReport::from_json(j);
}

namespace {

int method_rank(const std::string& m) {
    if (m == "direct") return 0;
    if (m.rfind("tent", 0) == 0) return 1;
    if (m == "adaptive") return 2;
    if (m == "oracle") return 100;  // always last
    return 3;
}

std::string fmt_dice(real v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace

std::string comparison_markdown(
    const std::vector<std::pair<std::string, DiceReport>>& labeled_reports) {
    // columns: distinct labels in first-seen order; rows: methods in rank order
    std::vector<std::string> labels;
    std::vector<std::string> methods;
    for (const auto& [label, rep] : labeled_reports) {
        if (std::find(labels.begin(), labels.end(), label) == labels.end())
            labels.push_back(label);
        if (std::find(methods.begin(), methods.end(), rep.method) == methods.end())
            methods.push_back(rep.method);
    }
    std::stable_sort(methods.begin(), methods.end(), [](const auto& a, const auto& b) {
        return method_rank(a) < method_rank(b);
    });

    std::ostringstream os;
    os << "| Method |";
    for (const auto& l : labels) os << " " << l << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < labels.size(); ++i) os << "---|";
    os << "\n";
    for (const auto& m : methods) {
        os << "| " << m << " |";
        for (const auto& l : labels) {
            const DiceReport* found = nullptr;
            for (const auto& [label, rep] : labeled_reports)
                if (label == l && rep.method == m) found = &rep;
            os << " " << (found ? fmt_dice(found->mean_dice) : "—") << " |";
        }
        os << "\n";
    }
    return os.str();
}

void emit_comparison_markdown(
    const std::vector<std::pair<std::string, DiceReport>>& labeled_reports,
    const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write " + path.string());
    f << comparison_markdown(labeled_reports);
}

DiceReport score_predictions(const std::vector<std::pair<std::string, ByteTensor>>& predictions,
                             const std::vector<ByteTensor>& ground_truth, long num_classes,
                             const std::string& method, const nlohmann::json& metadata) {
    if (predictions.size() != ground_truth.size())
        throw validation_error("score_predictions: prediction/ground-truth count mismatch");
    DiceReport r;
    r.method = method;
    r.num_classes = num_classes;
    r.metadata = metadata;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        std::vector<real> dices;
        for (long c = 1; c < num_classes; ++c)
            dices.push_back(dice_score(predictions[i].second, ground_truth[i],
                                       static_cast<int>(c)));
        r.per_instance.emplace_back(predictions[i].first, std::move(dices));
    }
    r.finalize();
    return r;
}

}  // namespace adaseg
