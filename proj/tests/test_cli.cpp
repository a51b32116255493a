#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "adaseg/metrics.hpp"

using namespace adaseg;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    const char* p = std::getenv("ADASEG_CLI");
    return p ? p : "";
}

int run(const std::string& args) {
    const std::string cmd = cli_path() + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

fs::path write_micro_config(const fs::path& dir) {
    nlohmann::json j;
    j["experiment_name"] = "cli-micro";
    j["seed"] = 3;
    j["output_dir"] = (dir / "run").string();
    j["synth"] = {{"n_train", 8},
                  {"n_test", 4},
                  {"size", {32, 32}},
                  {"num_classes", 2},
                  {"target_shift", "strong"},
                  {"corpus", {{"n_train", 6}, {"n_test", 2}, {"domains", {"identity", "mild"}}}}};
    j["arch"] = {{"base_channels", 2}, {"num_classes", 2}};
    j["dpg"] = {{"depth", 2}, {"base_channels", 2}, {"code_channels", 4}};
    j["train"] = {{"epochs", 1}, {"lr_max", 1e-3}, {"lr_min", 1e-4}, {"batch_size", 4}};
    j["tent"] = {{"shots", 1}, {"lr", 1e-3}, {"batch_size", 4}};
    fs::create_directories(dir);
    const auto path = dir / "config.json";
    std::ofstream f(path);
    f << j.dump(2);
    return path;
}

}  // namespace

TEST_CASE("cli pipeline runs end-to-end from an empty directory") {
    REQUIRE_FALSE(cli_path().empty());
    const auto dir = fs::temp_directory_path() / "adaseg_test_cli";
    fs::remove_all(dir);
    const auto cfg = write_micro_config(dir);
    const std::string base = "--config " + cfg.string();

    CHECK(run(base + " synth") == 0);
    // refuses overwrite without --force
    CHECK(run(base + " synth") == 1);
    CHECK(run(base + " --force synth") == 0);

    CHECK(run(base + " pretrain-dpg") == 0);
    CHECK(fs::exists(dir / "run/dpg/manifest.json"));
    CHECK(fs::exists(dir / "run/dpg/loss_curve.csv"));

    CHECK(run(base + " train --norm adabn --dataset source") == 0);
    CHECK(run(base + " train --norm bn --dataset source") == 0);
    CHECK(fs::exists(dir / "run/model_adabn_source/weights.bin"));

    CHECK(run(base + " adapt") == 0);
    CHECK(fs::exists(dir / "run/adapt_target/report.json"));
    CHECK(fs::exists(dir / "run/adapt_target/masks"));

    CHECK(run(base + " baseline --method direct") == 0);
    CHECK(run(base + " baseline --method tent --shots 1") == 0);
    CHECK(fs::exists(dir / "run/baseline_direct_target/report.json"));
    CHECK(fs::exists(dir / "run/baseline_tent1_target/report.json"));

    const std::string runs = (dir / "run/baseline_direct_target").string() + " " +
                             (dir / "run/baseline_tent1_target").string() + " " +
                             (dir / "run/adapt_target").string();
    CHECK(run(base + " report " + runs) == 0);
    CHECK(fs::exists(dir / "run/comparison.md"));

    // provenance records written by every command
    for (const auto* cmd :
         {"synth", "pretrain-dpg", "train", "adapt", "baseline", "report"})
        CHECK(fs::exists(dir / "run" / (std::string(cmd) + "_provenance.json")));

    // the emitted reports are loadable and carry the documented fields
    DiceReport rep = load_report(dir / "run/adapt_target/report.json");
    CHECK(rep.method == "adaptive");
    CHECK(rep.per_instance.size() == 4);
}

TEST_CASE("cli maps error classes onto exit codes") {
    REQUIRE_FALSE(cli_path().empty());
    const auto dir = fs::temp_directory_path() / "adaseg_test_cli_err";
    fs::remove_all(dir);
    fs::create_directories(dir);

    // missing config file -> i/o error (3)
    CHECK(run("--config " + (dir / "nope.json").string() + " synth") == 3);

    // config with an unknown shift preset -> validation (1)
    nlohmann::json j;
    j["output_dir"] = (dir / "run").string();
    j["synth"] = {{"n_train", 1}, {"n_test", 1}, {"size", {32, 32}}, {"num_classes", 2},
                  {"target_shift", "does-not-exist"},
                  {"corpus", {{"n_train", 1}, {"n_test", 1}, {"domains", {"identity"}}}}};
    std::ofstream(dir / "bad.json") << j.dump();
    CHECK(run("--config " + (dir / "bad.json").string() + " synth") == 1);

    // adapt without checkpoints -> i/o error (3)
    nlohmann::json ok = j;
    ok["synth"]["target_shift"] = "strong";
    std::ofstream(dir / "ok.json") << ok.dump();
    CHECK(run("--config " + (dir / "ok.json").string() + " adapt") == 3);

    // unknown subcommand -> parse error (1)
    CHECK(run("frobnicate") == 1);
}
