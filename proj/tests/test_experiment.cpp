#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <fedseg/experiment.hpp>

#include "json.hpp"

using namespace fedseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string tiny_config_text(bool with_centralized = true) {
    std::string strategies = R"([
        {"kind": "federated", "rounds": 2},
        {"kind": "ciil", "cycles": 2},
        {"kind": "iil", "patience": 0, "max_epochs_per_visit": 2})";
    if (with_centralized)
        strategies = R"([
        {"kind": "centralized", "epochs": 2},
        {"kind": "federated", "rounds": 2},
        {"kind": "ciil", "cycles": 2},
        {"kind": "iil", "patience": 0, "max_epochs_per_visit": 2})";
    return R"({
        "name": "tiny",
        "cohort": {"subjects": 8, "slices_per_subject": 2, "height": 12, "width": 12,
                   "profiles": [{"lesion_radius_min": 2, "lesion_radius_max": 4}]},
        "partition": {"kind": "balanced", "institutions": 2, "holdout": 2},
        "model": {"kind": "mini_unet", "base_channels": 2, "depth": 1, "dropout": 0.1},
        "training": {"batch_size": 8, "record_wall_time": false, "baseline_inits": 2,
                     "baseline_epochs": 2},
        "strategies": )" +
           strategies + R"(],
        "seeds": [1, 2]
    })";
}

experiment_config tiny_config(bool with_centralized = true) {
    return parse_config(json::parse(tiny_config_text(with_centralized)));
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct temp_dir {
    fs::path path;
    explicit temp_dir(const std::string& name) : path(fs::path("exp_out") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~temp_dir() { fs::remove_all(path); }
};

} // namespace

TEST_CASE("a full experiment writes one artifact pair per cell") {
    temp_dir dir("full");
    const auto res = run_experiment(tiny_config(), dir.path.string());
    CHECK(res.all_ok());
    REQUIRE(res.cells.size() == 8); // 4 strategies x 2 seeds

    for (const auto& c : res.cells) {
        CHECK(c.ok);
        CHECK(c.error.empty());
        CHECK(fs::exists(dir.path / (c.stem + ".summary.json")));
        CHECK(fs::exists(dir.path / (c.stem + ".runlog.csv")));
        CHECK(!std::isnan(c.final_dice));
        if (c.strategy == "centralized")
            CHECK(c.ds_ratio == 1.0);
        else
            CHECK(c.ds_ratio > 0.0);
    }

    const auto rep = emit_report(dir.path.string());
    CHECK(rep.all_cells_ok);
    CHECK(rep.warnings.empty());
    CHECK(fs::exists(dir.path / "report.csv"));
    CHECK(fs::exists(dir.path / "report.md"));
    CHECK(fs::exists(dir.path / "convergence.csv"));

    // four strategies, seeds grouped: header plus 4 rows
    const auto csv = slurp(dir.path / "report.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
    CHECK(csv.find("centralized") != std::string::npos);
    CHECK(csv.find("federated") != std::string::npos);
}

TEST_CASE("summaries carry the fields the report needs") {
    temp_dir dir("fields");
    const auto res = run_experiment(tiny_config(), dir.path.string());
    REQUIRE(res.all_ok());

    const auto j = json::parse(slurp(dir.path / "federated_s1.summary.json"));
    CHECK(j["strategy"] == "federated");
    CHECK(j["seed"] == 1);
    CHECK(j["ok"] == true);
    CHECK(j.contains("final_dice"));
    CHECK(j.contains("ds_ratio"));
    CHECK(j.contains("final_params_crc32"));
    CHECK(j.contains("forgetting_amplitude_w5"));
    CHECK(j["mode"] == "in_process");
    CHECK(j.contains("config"));

    const auto base = json::parse(slurp(dir.path / "centralized_s1.summary.json"));
    CHECK(base["ds_ratio"] == 1.0);
}

TEST_CASE("rerunning an experiment reproduces every run log bytewise") {
    temp_dir a("det_a"), b("det_b");
    const auto ra = run_experiment(tiny_config(), a.path.string());
    const auto rb = run_experiment(tiny_config(), b.path.string());
    REQUIRE(ra.all_ok());
    REQUIRE(rb.all_ok());
    REQUIRE(ra.cells.size() == rb.cells.size());
    for (const auto& c : ra.cells)
        CHECK(slurp(a.path / (c.stem + ".runlog.csv")) ==
              slurp(b.path / (c.stem + ".runlog.csv")));
}

TEST_CASE("report regeneration is idempotent bytewise") {
    temp_dir dir("idem");
    run_experiment(tiny_config(), dir.path.string());
    emit_report(dir.path.string());
    const auto csv1 = slurp(dir.path / "report.csv");
    const auto md1 = slurp(dir.path / "report.md");
    const auto conv1 = slurp(dir.path / "convergence.csv");
    emit_report(dir.path.string());
    CHECK(slurp(dir.path / "report.csv") == csv1);
    CHECK(slurp(dir.path / "report.md") == md1);
    CHECK(slurp(dir.path / "convergence.csv") == conv1);
}

TEST_CASE("without a configured baseline the denominator row is hidden") {
    temp_dir dir("nobase");
    const auto res = run_experiment(tiny_config(false), dir.path.string());
    CHECK(res.all_ok());
    // baseline cells still run (the ratio needs them) but are marked
    bool saw_baseline_only = false;
    for (const auto& c : res.cells)
        if (c.baseline_only) saw_baseline_only = true;
    CHECK(saw_baseline_only);

    emit_report(dir.path.string());
    const auto csv = slurp(dir.path / "report.csv");
    CHECK(csv.find("centralized") == std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4); // header + 3 strategies
}

TEST_CASE("a failing cell is contained and reported") {
    auto cfg = parse_config(json::parse(R"({
        "cohort": {"subjects": 5, "slices_per_subject": 2, "height": 12, "width": 12,
                   "profiles": [{"lesion_radius_min": 2, "lesion_radius_max": 4}]},
        "partition": {"kind": "balanced", "institutions": 3, "holdout": 4},
        "model": {"kind": "logistic"},
        "strategies": [{"kind": "federated", "rounds": 1}],
        "seeds": [1]
    })"));
    temp_dir dir("fail");
    const auto res = run_experiment(cfg, dir.path.string());
    CHECK(!res.all_ok());
    REQUIRE(!res.cells.empty());
    bool saw_error = false;
    for (const auto& c : res.cells)
        if (!c.ok) {
            saw_error = true;
            CHECK(!c.error.empty());
        }
    CHECK(saw_error);
}

TEST_CASE("sweeps fan out into prefixed cells") {
    auto cfg = parse_config(json::parse(R"({
        "cohort": {"subjects": 10, "slices_per_subject": 2, "height": 12, "width": 12,
                   "profiles": [{"lesion_radius_min": 2, "lesion_radius_max": 4}]},
        "partition": {"kind": "balanced", "institutions": 2, "holdout": 2},
        "model": {"kind": "logistic"},
        "training": {"batch_size": 8, "record_wall_time": false, "baseline_inits": 1,
                     "baseline_epochs": 1},
        "strategies": [{"kind": "federated", "rounds": 1}],
        "seeds": [1],
        "sweep": {"institutions": [2, 4]}
    })"));
    temp_dir dir("sweep");
    const auto res = run_experiment(cfg, dir.path.string());
    CHECK(res.all_ok());
    CHECK(fs::exists(dir.path / "k2_federated_s1.summary.json"));
    CHECK(fs::exists(dir.path / "k4_federated_s1.summary.json"));

    emit_report(dir.path.string());
    const auto csv = slurp(dir.path / "report.csv");
    CHECK(csv.find("institutions,2") != std::string::npos);
    CHECK(csv.find("institutions,4") != std::string::npos);

    const auto conv = slurp(dir.path / "convergence.csv");
    CHECK(conv.find("sweep_value,strategy,seed") != std::string::npos);
}
