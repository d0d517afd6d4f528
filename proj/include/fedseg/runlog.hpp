#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedseg/errors.hpp"

namespace fedseg {

// One scored point on a run's timeline. `kind` names the schedule unit that
// just finished ("epoch", "round", "visit", "cycle"); fields that were not
// measured at this step stay NaN / -1 / empty.
struct run_step {
    std::string kind;
    int index = 0;
    double global_val_dice = std::numeric_limits<double>::quiet_NaN();
    double inst0_train_dice = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> per_inst_val_dice;
    long long wall_ms = -1;
    std::uint32_t params_crc = 0;
};

struct visit_info {
    int institution_id = 0;
    int epochs_run = 0;
    bool stopped_early = false;
};

struct run_log {
    std::string strategy;
    std::uint64_t seed = 0;
    double final_dice = std::numeric_limits<double>::quiet_NaN();
    double ds_ratio = std::numeric_limits<double>::quiet_NaN();
    std::uint32_t final_params_crc = 0;
    std::vector<run_step> steps;
    std::vector<visit_info> visits;
};

namespace detail {

inline std::string format_double(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::string format_crc(std::uint32_t crc) {
    char buf[12];
    std::snprintf(buf, sizeof buf, "%08x", crc);
    return buf;
}

inline std::string join_doubles(const std::vector<double>& vs) {
    std::string out;
    for (std::size_t i = 0; i < vs.size(); ++i) {
        if (i) out += ';';
        out += format_double(vs[i]);
    }
    return out;
}

} // namespace detail

inline std::string runlog_csv_string(const run_log& log) {
    std::string out =
        "step_kind,step_index,global_val_dice,inst0_train_dice,per_inst_val,"
        "wall_ms,params_crc32\n";
    for (const auto& s : log.steps) {
        out += s.kind;
        out += ',';
        out += std::to_string(s.index);
        out += ',';
        out += detail::format_double(s.global_val_dice);
        out += ',';
        out += detail::format_double(s.inst0_train_dice);
        out += ',';
        out += detail::join_doubles(s.per_inst_val_dice);
        out += ',';
        out += s.wall_ms < 0 ? std::string() : std::to_string(s.wall_ms);
        out += ',';
        out += detail::format_crc(s.params_crc);
        out += '\n';
    }
    return out;
}

inline void write_runlog_csv(const run_log& log, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw precondition_error("cannot open for writing: " + path);
    f << runlog_csv_string(log);
}

inline nlohmann::json run_summary_json(const run_log& log,
                                       const nlohmann::json* config_echo = nullptr) {
    nlohmann::json j;
    j["strategy"] = log.strategy;
    j["seed"] = log.seed;
    j["steps"] = log.steps.size();
    if (!std::isnan(log.final_dice)) j["final_dice"] = log.final_dice;
    if (!std::isnan(log.ds_ratio)) j["ds_ratio"] = log.ds_ratio;
    j["final_params_crc32"] = detail::format_crc(log.final_params_crc);
    long long total_ms = 0;
    bool timed = false;
    for (const auto& s : log.steps)
        if (s.wall_ms >= 0) {
            total_ms += s.wall_ms;
            timed = true;
        }
    if (timed) j["total_wall_ms"] = total_ms;
    if (!log.visits.empty()) {
        nlohmann::json vs = nlohmann::json::array();
        for (const auto& v : log.visits)
            vs.push_back({{"institution_id", v.institution_id},
                          {"epochs_run", v.epochs_run},
                          {"stopped_early", v.stopped_early}});
        j["visits"] = vs;
    }
    if (config_echo) j["config"] = *config_echo;
    return j;
}

inline void write_run_summary_json(const run_log& log, const std::string& path,
                                   const nlohmann::json* config_echo = nullptr) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw precondition_error("cannot open for writing: " + path);
    f << run_summary_json(log, config_echo).dump(2) << '\n';
}

} // namespace fedseg
