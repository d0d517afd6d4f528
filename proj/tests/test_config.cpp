#include <catch2/catch_amalgamated.hpp>

#include <string>

#include <fedseg/config.hpp>

#include "json.hpp"

using namespace fedseg;
using nlohmann::json;

namespace {

experiment_config parse(const std::string& text) { return parse_config(json::parse(text)); }

std::string error_text(const std::string& text) {
    try {
        parse(text);
    } catch (const config_error& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_CASE("a minimal document fills every default") {
    const auto cfg = parse(R"({"strategies": [{"kind": "federated"}]})");
    CHECK(cfg.name == "experiment");
    CHECK(cfg.mode == run_mode::in_process);
    CHECK(cfg.cohort.subjects == 210);
    CHECK(cfg.cohort.slices_per_subject == 8);
    CHECK(cfg.cohort.height == 32);
    CHECK(cfg.cohort.width == 32);
    CHECK(cfg.cohort.heterogeneity == 0.0);
    CHECK(cfg.partition.kind == partition_kind::data_sharing);
    CHECK(cfg.model.kind == "mini_unet");
    CHECK(cfg.model.base_channels == 8);
    CHECK(cfg.model.depth == 2);
    CHECK(cfg.model.dropout == 0.2);
    CHECK(cfg.training.optimizer == opt_kind::adam);
    CHECK(cfg.training.learning_rate == 5e-4);
    CHECK(cfg.training.batch_size == 64);
    CHECK(cfg.seeds == std::vector<std::uint64_t>{1});
    REQUIRE(cfg.strategies.size() == 1);
    CHECK(cfg.strategies[0].kind == strategy_kind::federated);
    CHECK(cfg.strategies[0].so.rounds == 20);
    CHECK(cfg.strategies[0].so.epochs_per_round == 1);
    CHECK(cfg.sweep_key.empty());
}

TEST_CASE("unknown keys are named in the failure") {
    CHECK(error_text(R"({"strategies": [{"kind": "federated"}], "colour": 1})")
              .find("colour") != std::string::npos);
    CHECK(error_text(
              R"({"strategies": [{"kind": "federated"}], "cohort": {"subjcts": 2}})")
              .find("subjcts") != std::string::npos);
}

TEST_CASE("strategy knobs only apply to their own kind") {
    // early-stopping patience belongs to the single-pass strategy
    const auto msg =
        error_text(R"({"strategies": [{"kind": "federated", "patience": 3}]})");
    CHECK(msg.find("patience") != std::string::npos);

    CHECK(error_text(R"({"strategies": [{"kind": "centralized", "rounds": 5}]})")
              .find("rounds") != std::string::npos);
    CHECK(error_text(R"({"strategies": [{"kind": "iil", "cycles": 5}]})")
              .find("cycles") != std::string::npos);
}

TEST_CASE("strategy aliases and fields parse") {
    const auto cfg = parse(R"({
        "strategies": [
            {"kind": "centralized", "epochs": 7},
            {"kind": "fl", "rounds": 9, "epochs_per_round": 2, "adam_policy": "reset_each_round"},
            {"kind": "ciil", "cycles": 4, "epochs_per_cycle_stop": 2,
             "institution_order": "seeded_shuffle_per_cycle"},
            {"kind": "iil", "patience": 5, "max_epochs_per_visit": 50, "seed": 12}
        ]})");
    REQUIRE(cfg.strategies.size() == 4);
    CHECK(cfg.strategies[0].kind == strategy_kind::centralized);
    CHECK(cfg.strategies[0].so.epochs == 7);
    CHECK(cfg.strategies[1].kind == strategy_kind::federated);
    CHECK(cfg.strategies[1].so.rounds == 9);
    CHECK(cfg.strategies[1].so.epochs_per_round == 2);
    CHECK(cfg.strategies[1].so.moments == adam_policy::reset_each_round);
    CHECK(cfg.strategies[2].kind == strategy_kind::ciil);
    CHECK(cfg.strategies[2].so.cycles == 4);
    CHECK(cfg.strategies[2].so.order == visit_order::seeded_shuffle_per_cycle);
    CHECK(cfg.strategies[3].kind == strategy_kind::iil);
    CHECK(cfg.strategies[3].so.patience == 5);
    CHECK(cfg.strategies[3].so.max_epochs_per_visit == 50);
    CHECK(cfg.strategies[3].has_seed);
    CHECK(cfg.strategies[3].seed == 12);
    CHECK(!cfg.strategies[0].has_seed);
}

TEST_CASE("strategies inherit the training block") {
    const auto cfg = parse(R"({
        "training": {"learning_rate": 0.01, "batch_size": 16, "optimizer": "sgd"},
        "strategies": [{"kind": "federated"}, {"kind": "ciil", "learning_rate": 0.1}]})");
    CHECK(cfg.strategies[0].so.learning_rate == 0.01);
    CHECK(cfg.strategies[0].so.batch_size == 16);
    CHECK(cfg.strategies[0].so.optimizer == opt_kind::sgd);
    CHECK(cfg.strategies[1].so.learning_rate == 0.1);
    CHECK(cfg.strategies[1].so.batch_size == 16);
}

TEST_CASE("profiles and the heterogeneity knob are mutually exclusive") {
    const auto ok = parse(R"({
        "cohort": {"heterogeneity": 0.5},
        "partition": {"kind": "balanced", "institutions": 4},
        "strategies": [{"kind": "federated"}]})");
    CHECK(ok.cohort.heterogeneity == 0.5);
    CHECK(ok.partition.by_profile); // defaults on when heterogeneity is set

    CHECK(error_text(R"({
        "cohort": {"heterogeneity": 0.5, "profiles": [{}]},
        "strategies": [{"kind": "federated"}]})") != "");

    CHECK(error_text(R"({
        "cohort": {"heterogeneity": 1.5},
        "strategies": [{"kind": "federated"}]})") != "");
}

TEST_CASE("explicit profiles parse their knobs") {
    const auto cfg = parse(R"({
        "cohort": {"profiles": [
            {"intensity_bias": 0.05, "lesion_count_min": 2, "lesion_count_max": 4,
             "lesion_radius_min": 2.0, "lesion_radius_max": 5.0, "noise_sigma": 0.1,
             "seed": 9, "weight": 2.0},
            {}
        ]},
        "strategies": [{"kind": "federated"}]})");
    REQUIRE(cfg.cohort.profiles.size() == 2);
    CHECK(cfg.cohort.profiles[0].intensity_bias == 0.05);
    CHECK(cfg.cohort.profiles[0].lesion_count_min == 2);
    CHECK(cfg.cohort.profiles[0].lesion_count_max == 4);
    CHECK(cfg.cohort.profiles[0].weight == 2.0);
    CHECK(cfg.cohort.profiles[1].weight == 1.0);
}

TEST_CASE("sweep validation") {
    const auto cfg = parse(R"({
        "partition": {"kind": "balanced", "institutions": 4},
        "strategies": [{"kind": "federated"}],
        "sweep": {"institutions": [4, 8]}})");
    CHECK(cfg.sweep_key == "institutions");
    CHECK(cfg.sweep_values == std::vector<double>{4, 8});

    // institutions sweep needs the balanced scheme
    CHECK(error_text(R"({
        "partition": {"kind": "real_profile"},
        "strategies": [{"kind": "federated"}],
        "sweep": {"institutions": [4]}})") != "");

    // epochs_per_round sweep needs a federated strategy
    CHECK(error_text(R"({
        "strategies": [{"kind": "centralized"}],
        "sweep": {"epochs_per_round": [1, 2]}})") != "");

    // one axis at a time
    CHECK(error_text(R"({
        "partition": {"kind": "balanced", "institutions": 4},
        "strategies": [{"kind": "federated"}],
        "sweep": {"institutions": [4], "heterogeneity": [0.1]}})") != "");

    CHECK(error_text(R"({
        "strategies": [{"kind": "federated"}],
        "sweep": {"momentum": [1]}})")
              .find("momentum") != std::string::npos);
}

TEST_CASE("distributed mode refuses in-process-only options") {
    CHECK(error_text(R"({
        "mode": "distributed",
        "strategies": [{"kind": "federated", "adam_policy": "aggregate_moments"}]})") != "");
    CHECK(error_text(R"({
        "mode": "distributed",
        "strategies": [{"kind": "ciil", "reset_moments_on_handoff": false}]})") != "");

    // but they are fine in-process
    CHECK_NOTHROW(parse(R"({
        "strategies": [{"kind": "federated", "adam_policy": "aggregate_moments"},
                        {"kind": "ciil", "reset_moments_on_handoff": false}]})"));
}

TEST_CASE("seeds must be non-negative integers") {
    CHECK(error_text(R"({"strategies": [{"kind": "federated"}], "seeds": []})") != "");
    CHECK(error_text(R"({"strategies": [{"kind": "federated"}], "seeds": [-1]})") != "");
    CHECK(error_text(R"({"strategies": [{"kind": "federated"}], "seeds": [1.5]})") != "");
    const auto cfg =
        parse(R"({"strategies": [{"kind": "federated"}], "seeds": [3, 1, 2]})");
    CHECK(cfg.seeds == std::vector<std::uint64_t>{3, 1, 2});
}

TEST_CASE("bad scalar values are refused") {
    CHECK(error_text(R"({"strategies": [{"kind": "federated"}], "mode": "cloud"})") != "");
    CHECK(error_text(R"({"strategies": []})") != "");
    CHECK(error_text(R"({"strategies": [{"kind": "gossip"}]})") != "");
    CHECK(error_text(R"({"cohort": {"subjects": 0}, "strategies": [{"kind": "fl"}]})") !=
          "");
    CHECK(error_text(
              R"({"training": {"batch_size": 0}, "strategies": [{"kind": "fl"}]})") != "");
    CHECK(error_text(
              R"({"model": {"kind": "vit"}, "strategies": [{"kind": "fl"}]})") != "");
    CHECK(error_text(
              R"({"strategies": [{"kind": "fl", "adam_policy": "momentum"}]})") != "");
}

TEST_CASE("the shipped presets parse and agree with the published setup") {
    const std::string dir = PRESET_DIR;
    const auto real = load_config(dir + "/paper_real_profile.json");
    CHECK(real.partition.kind == partition_kind::real_profile);
    CHECK(real.partition.institution_count() == 10);
    CHECK(real.partition.effective_holdout() == 45);
    CHECK(real.cohort.subjects == 210);
    CHECK(real.seeds.size() == 3);
    REQUIRE(real.strategies.size() == 4);
    CHECK(real.strategies[0].kind == strategy_kind::centralized);
    CHECK(!real.training.record_wall_time);

    const auto t3 = load_config(dir + "/paper_table3.json");
    CHECK(t3.sweep_key == "institutions");
    CHECK(t3.sweep_values == std::vector<double>{4, 8, 16, 32});
    CHECK(t3.cohort.heterogeneity == 1.0);
    CHECK(t3.partition.by_profile);

    const auto epr = load_config(dir + "/paper_epr_sweep.json");
    CHECK(epr.sweep_key == "epochs_per_round");

    const auto oracle = load_config(dir + "/fedsgd_oracle.json");
    CHECK(oracle.model.kind == "logistic");
    CHECK(oracle.training.optimizer == opt_kind::sgd);

    const auto smoke = load_config(dir + "/smoke.json");
    CHECK(smoke.strategies.size() == 4);
    CHECK(smoke.seeds.size() == 2);
}

TEST_CASE("loading a missing file names the path") {
    try {
        load_config("/nonexistent/nowhere.json");
        FAIL("expected a failure");
    } catch (const fedseg::error& e) {
        CHECK(std::string(e.what()).find("nowhere.json") != std::string::npos);
    }
}
