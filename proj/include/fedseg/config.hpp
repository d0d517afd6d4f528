#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedseg/cohort.hpp"
#include "fedseg/model.hpp"
#include "fedseg/strategies.hpp"

namespace fedseg {

enum class run_mode { in_process, distributed };

struct cohort_config {
    int subjects = 210;
    int slices_per_subject = 8;
    int height = 32;
    int width = 32;
    double heterogeneity = 0.0;
    std::vector<generation_profile> profiles; // empty: defaulted
};

struct strategy_config {
    strategy_kind kind = strategy_kind::centralized;
    strategy_options so;
    bool has_seed = false;
    std::uint64_t seed = 0; // overrides the experiment seed list when set
};

struct experiment_config {
    std::string name = "experiment";
    run_mode mode = run_mode::in_process;
    std::string output_dir;
    cohort_config cohort;
    partition_scheme partition;
    model_spec model;
    strategy_options training; // defaults every strategy starts from
    int timeout_ms = 120000;
    std::vector<strategy_config> strategies;
    std::vector<std::uint64_t> seeds;
    std::string sweep_key; // empty: no sweep
    std::vector<double> sweep_values;
    nlohmann::json echo; // the validated document, echoed into summaries
};

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::vector<std::string>& allowed,
                       const std::string& where) {
    std::string unknown;
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            unknown += (unknown.empty() ? "" : ", ") + it.key();
    if (!unknown.empty())
        throw config_error(where + ": unknown key(s): " + unknown);
}

inline void expect_object(const json& j, const std::string& where) {
    if (!j.is_object()) throw config_error(where + " must be an object");
}

inline double get_num(const json& j, const std::string& key, double dflt,
                      const std::string& where) {
    if (!j.contains(key)) return dflt;
    if (!j[key].is_number()) throw config_error(where + "." + key + " must be a number");
    return j[key].get<double>();
}

inline int get_int(const json& j, const std::string& key, int dflt,
                   const std::string& where) {
    if (!j.contains(key)) return dflt;
    if (!j[key].is_number_integer())
        throw config_error(where + "." + key + " must be an integer");
    return j[key].get<int>();
}

inline std::uint64_t get_u64(const json& j, const std::string& key, std::uint64_t dflt,
                             const std::string& where) {
    if (!j.contains(key)) return dflt;
    if (!j[key].is_number_unsigned() && !j[key].is_number_integer())
        throw config_error(where + "." + key + " must be a non-negative integer");
    if (j[key].is_number_integer() && j[key].get<std::int64_t>() < 0)
        throw config_error(where + "." + key + " must be a non-negative integer");
    return j[key].get<std::uint64_t>();
}

inline bool get_bool(const json& j, const std::string& key, bool dflt,
                     const std::string& where) {
    if (!j.contains(key)) return dflt;
    if (!j[key].is_boolean()) throw config_error(where + "." + key + " must be a boolean");
    return j[key].get<bool>();
}

inline std::string get_str(const json& j, const std::string& key, const std::string& dflt,
                           const std::string& where) {
    if (!j.contains(key)) return dflt;
    if (!j[key].is_string()) throw config_error(where + "." + key + " must be a string");
    return j[key].get<std::string>();
}

inline generation_profile parse_profile(const json& j, const std::string& where) {
    expect_object(j, where);
    check_keys(j,
               {"intensity_bias", "lesion_count_min", "lesion_count_max",
                "lesion_radius_min", "lesion_radius_max", "noise_sigma", "seed", "weight"},
               where);
    generation_profile p;
    p.intensity_bias = get_num(j, "intensity_bias", p.intensity_bias, where);
    p.lesion_count_min = get_int(j, "lesion_count_min", p.lesion_count_min, where);
    p.lesion_count_max = get_int(j, "lesion_count_max", p.lesion_count_max, where);
    p.lesion_radius_min = get_num(j, "lesion_radius_min", p.lesion_radius_min, where);
    p.lesion_radius_max = get_num(j, "lesion_radius_max", p.lesion_radius_max, where);
    p.noise_sigma = get_num(j, "noise_sigma", p.noise_sigma, where);
    p.seed = get_u64(j, "seed", p.seed, where);
    p.weight = get_num(j, "weight", p.weight, where);
    return p;
}

inline void parse_common_strategy_keys(const json& j, strategy_config& sc,
                                       const std::string& where) {
    sc.so.learning_rate = get_num(j, "learning_rate", sc.so.learning_rate, where);
    sc.so.batch_size = get_int(j, "batch_size", sc.so.batch_size, where);
    if (j.contains("optimizer")) {
        const auto s = get_str(j, "optimizer", "", where);
        if (s == "adam")
            sc.so.optimizer = opt_kind::adam;
        else if (s == "sgd")
            sc.so.optimizer = opt_kind::sgd;
        else
            throw config_error(where + ".optimizer must be \"adam\" or \"sgd\"");
    }
    if (j.contains("seed")) {
        sc.has_seed = true;
        sc.seed = get_u64(j, "seed", 0, where);
    }
}

inline strategy_config parse_strategy(const json& j, const strategy_options& defaults,
                                      const std::string& where) {
    expect_object(j, where);
    if (!j.contains("kind")) throw config_error(where + ": missing \"kind\"");
    std::string kind_name = get_str(j, "kind", "", where);
    if (kind_name == "fl") kind_name = "federated";
    strategy_config sc;
    sc.kind = strategy_kind_from(kind_name);
    sc.so = defaults;

    const std::vector<std::string> common = {"kind", "learning_rate", "optimizer",
                                             "batch_size", "seed"};
    auto with = [&](std::initializer_list<const char*> extra) {
        std::vector<std::string> keys = common;
        for (const char* k : extra) keys.emplace_back(k);
        return keys;
    };

    switch (sc.kind) {
        case strategy_kind::centralized:
            check_keys(j, with({"epochs"}), where);
            sc.so.epochs = get_int(j, "epochs", sc.so.epochs, where);
            if (sc.so.epochs < 0) throw config_error(where + ".epochs must be >= 0");
            break;
        case strategy_kind::federated:
            check_keys(j, with({"rounds", "epochs_per_round", "adam_policy"}), where);
            sc.so.rounds = get_int(j, "rounds", sc.so.rounds, where);
            sc.so.epochs_per_round =
                get_int(j, "epochs_per_round", sc.so.epochs_per_round, where);
            if (sc.so.rounds < 0) throw config_error(where + ".rounds must be >= 0");
            if (sc.so.epochs_per_round < 1)
                throw config_error(where + ".epochs_per_round must be >= 1");
            if (j.contains("adam_policy"))
                sc.so.moments = adam_policy_from(get_str(j, "adam_policy", "", where));
            break;
        case strategy_kind::ciil:
            check_keys(j,
                       with({"cycles", "epochs_per_cycle_stop", "institution_order",
                             "reset_moments_on_handoff"}),
                       where);
            sc.so.cycles = get_int(j, "cycles", sc.so.cycles, where);
            sc.so.epochs_per_cycle_stop =
                get_int(j, "epochs_per_cycle_stop", sc.so.epochs_per_cycle_stop, where);
            if (sc.so.cycles < 1) throw config_error(where + ".cycles must be >= 1");
            if (sc.so.epochs_per_cycle_stop < 1)
                throw config_error(where + ".epochs_per_cycle_stop must be >= 1");
            if (j.contains("institution_order"))
                sc.so.order = visit_order_from(get_str(j, "institution_order", "", where));
            sc.so.reset_moments_on_handoff = get_bool(j, "reset_moments_on_handoff",
                                                      sc.so.reset_moments_on_handoff, where);
            break;
        case strategy_kind::iil:
            check_keys(j,
                       with({"patience", "max_epochs_per_visit", "institution_order",
                             "reset_moments_on_handoff"}),
                       where);
            sc.so.patience = get_int(j, "patience", sc.so.patience, where);
            sc.so.max_epochs_per_visit =
                get_int(j, "max_epochs_per_visit", sc.so.max_epochs_per_visit, where);
            if (sc.so.patience < 0) throw config_error(where + ".patience must be >= 0");
            if (sc.so.max_epochs_per_visit < 1)
                throw config_error(where + ".max_epochs_per_visit must be >= 1");
            if (j.contains("institution_order"))
                sc.so.order = visit_order_from(get_str(j, "institution_order", "", where));
            sc.so.reset_moments_on_handoff = get_bool(j, "reset_moments_on_handoff",
                                                      sc.so.reset_moments_on_handoff, where);
            break;
    }
    parse_common_strategy_keys(j, sc, where);
    return sc;
}

} // namespace detail

// Optimizer state cannot travel over the wire, so two in-process-only knobs
// are rejected up front in distributed mode. Also called after a CLI --mode
// override.
inline void validate_mode_constraints(const experiment_config& cfg) {
    if (cfg.mode != run_mode::distributed) return;
    for (const auto& s : cfg.strategies) {
        if (s.kind == strategy_kind::federated &&
            s.so.moments == adam_policy::aggregate_moments)
            throw config_error(
                "adam_policy aggregate_moments is in-process only; distributed mode "
                "cannot ship optimizer state");
        if ((s.kind == strategy_kind::ciil || s.kind == strategy_kind::iil) &&
            !s.so.reset_moments_on_handoff)
            throw config_error(
                "reset_moments_on_handoff=false is in-process only; distributed mode "
                "cannot ship optimizer state");
    }
}

inline experiment_config parse_config(const nlohmann::json& doc) {
    using detail::check_keys;
    using detail::expect_object;
    expect_object(doc, "config");
    check_keys(doc,
               {"name", "mode", "output_dir", "cohort", "partition", "model", "training",
                "strategies", "seeds", "sweep"},
               "config");

    experiment_config cfg;
    cfg.echo = doc;
    cfg.name = detail::get_str(doc, "name", cfg.name, "config");
    const auto mode = detail::get_str(doc, "mode", "in_process", "config");
    if (mode == "in_process")
        cfg.mode = run_mode::in_process;
    else if (mode == "distributed")
        cfg.mode = run_mode::distributed;
    else
        throw config_error("config.mode must be \"in_process\" or \"distributed\"");
    cfg.output_dir = detail::get_str(doc, "output_dir", "", "config");

    if (doc.contains("cohort")) {
        const auto& j = doc["cohort"];
        expect_object(j, "config.cohort");
        check_keys(j,
                   {"subjects", "slices_per_subject", "height", "width", "heterogeneity",
                    "profiles"},
                   "config.cohort");
        cfg.cohort.subjects = detail::get_int(j, "subjects", cfg.cohort.subjects, "cohort");
        cfg.cohort.slices_per_subject =
            detail::get_int(j, "slices_per_subject", cfg.cohort.slices_per_subject, "cohort");
        cfg.cohort.height = detail::get_int(j, "height", cfg.cohort.height, "cohort");
        cfg.cohort.width = detail::get_int(j, "width", cfg.cohort.width, "cohort");
        cfg.cohort.heterogeneity =
            detail::get_num(j, "heterogeneity", cfg.cohort.heterogeneity, "cohort");
        if (cfg.cohort.subjects < 1) throw config_error("cohort.subjects must be >= 1");
        if (cfg.cohort.slices_per_subject < 1)
            throw config_error("cohort.slices_per_subject must be >= 1");
        if (cfg.cohort.heterogeneity < 0 || cfg.cohort.heterogeneity > 1)
            throw config_error("cohort.heterogeneity must be in [0,1]");
        if (j.contains("profiles")) {
            if (!j["profiles"].is_array())
                throw config_error("cohort.profiles must be an array");
            int i = 0;
            for (const auto& pj : j["profiles"])
                cfg.cohort.profiles.push_back(detail::parse_profile(
                    pj, "cohort.profiles[" + std::to_string(i++) + "]"));
            if (cfg.cohort.heterogeneity > 0)
                throw config_error(
                    "cohort: give explicit profiles or a heterogeneity knob, not both");
        }
    }

    if (doc.contains("partition")) {
        const auto& j = doc["partition"];
        expect_object(j, "config.partition");
        check_keys(j, {"kind", "institutions", "holdout", "by_profile"}, "config.partition");
        const auto kind = detail::get_str(j, "kind", "data_sharing", "partition");
        if (kind == "data_sharing")
            cfg.partition.kind = partition_kind::data_sharing;
        else if (kind == "simulated_balanced" || kind == "balanced")
            cfg.partition.kind = partition_kind::simulated_balanced;
        else if (kind == "real_profile")
            cfg.partition.kind = partition_kind::real_profile;
        else
            throw config_error("partition.kind must be data_sharing, simulated_balanced, "
                               "or real_profile");
        cfg.partition.institutions =
            detail::get_int(j, "institutions", cfg.partition.institutions, "partition");
        cfg.partition.holdout_count =
            detail::get_int(j, "holdout", cfg.partition.holdout_count, "partition");
        cfg.partition.by_profile = detail::get_bool(
            j, "by_profile", cfg.cohort.heterogeneity > 0, "partition");
        if (cfg.partition.kind == partition_kind::simulated_balanced &&
            cfg.partition.institutions < 1)
            throw config_error("partition.institutions must be >= 1");
    } else {
        cfg.partition.by_profile = cfg.cohort.heterogeneity > 0;
    }

    if (doc.contains("model")) {
        const auto& j = doc["model"];
        expect_object(j, "config.model");
        check_keys(j, {"kind", "in_channels", "base_channels", "depth", "dropout"},
                   "config.model");
        const auto kind = detail::get_str(j, "kind", "mini_unet", "model");
        if (kind != "mini_unet" && kind != "logistic")
            throw config_error("model.kind must be \"mini_unet\" or \"logistic\"");
        cfg.model.kind = kind;
        cfg.model.in_channels = detail::get_int(j, "in_channels", cfg.model.in_channels,
                                                "model");
        cfg.model.base_channels =
            detail::get_int(j, "base_channels", cfg.model.base_channels, "model");
        cfg.model.depth = detail::get_int(j, "depth", cfg.model.depth, "model");
        cfg.model.dropout = detail::get_num(j, "dropout", cfg.model.dropout, "model");
    }

    if (doc.contains("training")) {
        const auto& j = doc["training"];
        expect_object(j, "config.training");
        check_keys(j,
                   {"optimizer", "learning_rate", "batch_size", "record_wall_time",
                    "track_inst0", "inst0_eval_cap", "track_local_val", "track_train_dice",
                    "baseline_inits", "baseline_epochs", "worker_threads", "timeout_ms"},
                   "config.training");
        auto& so = cfg.training;
        if (j.contains("optimizer")) {
            const auto s = detail::get_str(j, "optimizer", "", "training");
            if (s == "adam")
                so.optimizer = opt_kind::adam;
            else if (s == "sgd")
                so.optimizer = opt_kind::sgd;
            else
                throw config_error("training.optimizer must be \"adam\" or \"sgd\"");
        }
        so.learning_rate = detail::get_num(j, "learning_rate", so.learning_rate, "training");
        so.batch_size = detail::get_int(j, "batch_size", so.batch_size, "training");
        so.record_wall_time =
            detail::get_bool(j, "record_wall_time", so.record_wall_time, "training");
        so.track_inst0 = detail::get_bool(j, "track_inst0", so.track_inst0, "training");
        so.inst0_eval_cap = detail::get_int(j, "inst0_eval_cap", so.inst0_eval_cap,
                                            "training");
        so.track_local_val =
            detail::get_bool(j, "track_local_val", so.track_local_val, "training");
        so.track_train_dice =
            detail::get_bool(j, "track_train_dice", so.track_train_dice, "training");
        so.baseline_inits = detail::get_int(j, "baseline_inits", so.baseline_inits,
                                            "training");
        so.epochs = detail::get_int(j, "baseline_epochs", so.epochs, "training");
        so.worker_threads = detail::get_int(j, "worker_threads", so.worker_threads,
                                            "training");
        cfg.timeout_ms = detail::get_int(j, "timeout_ms", cfg.timeout_ms, "training");
        if (so.batch_size < 1) throw config_error("training.batch_size must be >= 1");
        if (so.learning_rate <= 0) throw config_error("training.learning_rate must be > 0");
        if (so.baseline_inits < 1) throw config_error("training.baseline_inits must be >= 1");
        if (so.worker_threads < 1) throw config_error("training.worker_threads must be >= 1");
    }

    if (!doc.contains("strategies") || !doc["strategies"].is_array() ||
        doc["strategies"].empty())
        throw config_error("config.strategies must be a non-empty array");
    int si = 0;
    for (const auto& sj : doc["strategies"])
        cfg.strategies.push_back(detail::parse_strategy(
            sj, cfg.training, "strategies[" + std::to_string(si++) + "]"));

    if (doc.contains("seeds")) {
        if (!doc["seeds"].is_array() || doc["seeds"].empty())
            throw config_error("config.seeds must be a non-empty array");
        for (const auto& sj : doc["seeds"]) {
            if (!sj.is_number_integer() && !sj.is_number_unsigned())
                throw config_error("config.seeds entries must be integers");
            if (sj.is_number_integer() && sj.get<std::int64_t>() < 0)
                throw config_error("config.seeds entries must be non-negative");
            cfg.seeds.push_back(sj.get<std::uint64_t>());
        }
    } else {
        cfg.seeds = {1};
    }

    if (doc.contains("sweep")) {
        const auto& j = doc["sweep"];
        expect_object(j, "config.sweep");
        check_keys(j, {"institutions", "epochs_per_round", "heterogeneity"}, "config.sweep");
        if (j.size() != 1)
            throw config_error("config.sweep must hold exactly one axis");
        cfg.sweep_key = j.begin().key();
        if (!j.begin().value().is_array() || j.begin().value().empty())
            throw config_error("config.sweep." + cfg.sweep_key +
                               " must be a non-empty array");
        for (const auto& v : j.begin().value()) {
            if (!v.is_number())
                throw config_error("config.sweep." + cfg.sweep_key +
                                   " entries must be numbers");
            cfg.sweep_values.push_back(v.get<double>());
        }
        if (cfg.sweep_key == "institutions" &&
            cfg.partition.kind != partition_kind::simulated_balanced)
            throw config_error(
                "sweep over institutions needs partition.kind simulated_balanced");
        if (cfg.sweep_key == "epochs_per_round") {
            const bool any_fed =
                std::any_of(cfg.strategies.begin(), cfg.strategies.end(), [](const auto& s) {
                    return s.kind == strategy_kind::federated;
                });
            if (!any_fed)
                throw config_error(
                    "sweep over epochs_per_round needs a federated strategy");
        }
    }

    validate_mode_constraints(cfg);
    return cfg;
}

inline experiment_config load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open config file: " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw config_error("config " + path + " is not valid JSON: " + e.what());
    }
    try {
        return parse_config(doc);
    } catch (const config_error& e) {
        throw config_error(std::string(e.what()) + " (in " + path + ")");
    }
}

} // namespace fedseg
