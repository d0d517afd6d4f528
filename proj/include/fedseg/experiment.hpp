#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fedseg/config.hpp"
#include "fedseg/fedwire.hpp"
#include "fedseg/strategies.hpp"

namespace fedseg {

struct cell_result {
    std::string stem; // artifact file stem inside the output directory
    std::string strategy;
    std::uint64_t seed = 0;
    bool has_sweep = false;
    double sweep_value = 0;
    bool baseline_only = false; // ran only to supply the ds_ratio denominator
    bool ok = false;
    std::string error;
    double final_dice = std::numeric_limits<double>::quiet_NaN();
    double ds_ratio = std::numeric_limits<double>::quiet_NaN();
};

struct experiment_result {
    std::vector<cell_result> cells;

    bool all_ok() const {
        for (const auto& c : cells)
            if (!c.ok) return false;
        return !cells.empty();
    }
};

namespace detail {

inline std::string sweep_tag(const std::string& key) {
    if (key == "institutions") return "k";
    if (key == "epochs_per_round") return "epr";
    if (key == "heterogeneity") return "het";
    return key;
}

inline std::string value_text(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// Everything one (sweep value, seed) pairing needs to run its cells.
struct resolved_setting {
    partition_scheme scheme;
    cohort_config cohort;
    bool has_sweep = false;
    double sweep_value = 0;
    std::string prefix; // "" or e.g. "k8_"
};

inline resolved_setting resolve_sweep(const experiment_config& cfg, std::size_t idx) {
    resolved_setting rs;
    rs.scheme = cfg.partition;
    rs.cohort = cfg.cohort;
    if (cfg.sweep_key.empty()) return rs;
    rs.has_sweep = true;
    rs.sweep_value = cfg.sweep_values[idx];
    rs.prefix = sweep_tag(cfg.sweep_key) + value_text(rs.sweep_value) + "_";
    if (cfg.sweep_key == "institutions")
        rs.scheme.institutions = static_cast<int>(rs.sweep_value);
    else if (cfg.sweep_key == "heterogeneity")
        rs.cohort.heterogeneity = rs.sweep_value;
    return rs;
}

inline std::vector<generation_profile> resolve_profiles(const cohort_config& cc,
                                                        const partition_scheme& scheme) {
    if (!cc.profiles.empty()) return cc.profiles;
    generation_profile base;
    if (cc.heterogeneity > 0)
        return make_heterogeneous_profiles(base, scheme.institution_count(),
                                           cc.heterogeneity);
    return {base};
}

struct prepared_data {
    std::vector<subject> training;
    std::vector<subject> holdout;
    std::vector<institution_shard> shards;
};

inline prepared_data prepare_data(const resolved_setting& rs, std::uint64_t seed) {
    prepared_data d;
    const auto profiles = resolve_profiles(rs.cohort, rs.scheme);
    const auto cohort =
        generate_cohort(rs.cohort.subjects, profiles, derive_seed(seed, "cohort"),
                        rs.cohort.slices_per_subject, rs.cohort.height, rs.cohort.width);
    auto split = split_holdout(cohort, rs.scheme, seed);
    d.training = std::move(split.first);
    d.holdout = std::move(split.second);
    d.shards = partition(d.training, rs.scheme, seed);
    return d;
}

// Loopback distributed execution of one collaborative cell: the aggregator
// and every collaborator run as threads of this process, talking real TCP
// frames over 127.0.0.1. The returned final parameters are scored on the
// global holdout here, keeping final_dice comparable with in-process runs.
inline run_result<float> run_distributed_cell(strategy_kind kind, const model_spec& ms,
                                              const prepared_data& data,
                                              const strategy_options& so,
                                              std::uint64_t seed, int timeout_ms) {
    serve_options srv;
    srv.institutions = static_cast<int>(data.shards.size());
    srv.timeout_ms = timeout_ms;
    srv.kind = kind;
    srv.so = so;
    srv.ms = ms;
    srv.seed = seed;
    std::promise<std::uint16_t> port_promise;
    auto port_future = port_promise.get_future();
    srv.on_listening = [&](std::uint16_t p) { port_promise.set_value(p); };

    run_result<float> agg;
    std::exception_ptr agg_err;
    std::thread server([&] {
        try {
            agg = aggregator_serve(srv);
        } catch (...) {
            agg_err = std::current_exception();
            try {
                port_promise.set_value(0);
            } catch (const std::future_error&) {
            }
        }
    });

    const std::uint16_t port = port_future.get();
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> worker_err(data.shards.size());
    if (port != 0) {
        for (std::size_t i = 0; i < data.shards.size(); ++i)
            workers.emplace_back([&, i] {
                try {
                    collaborate_options co;
                    co.port = port;
                    co.institution_id = data.shards[i].institution_id;
                    co.ms = ms;
                    co.batch_size = so.batch_size;
                    co.optimizer = so.optimizer;
                    co.learning_rate = so.learning_rate;
                    co.seed = seed;
                    co.timeout_ms = timeout_ms;
                    collaborator_run(co, data.shards[i]);
                } catch (...) {
                    worker_err[i] = std::current_exception();
                }
            });
    }
    for (auto& w : workers) w.join();
    server.join();
    if (agg_err) std::rethrow_exception(agg_err);
    for (auto& e : worker_err)
        if (e) std::rethrow_exception(e);

    trainable_model<float> probe(ms);
    const auto hold = institution_shard::flatten(data.holdout);
    if (!hold.empty()) {
        probe.params.values = agg.params.values;
        agg.log.final_dice = evaluate(probe.net, probe.params, hold);
    }
    return agg;
}

inline void write_cell_artifacts(const std::filesystem::path& dir, const cell_result& cell,
                                 const run_log* log, const experiment_config& cfg) {
    nlohmann::json j;
    if (log) {
        j = run_summary_json(*log, nullptr);
        if (!log->steps.empty()) {
            bool any = false;
            for (const auto& s : log->steps)
                if (!std::isnan(s.inst0_train_dice)) any = true;
            if (any) j["forgetting_amplitude_w5"] = forgetting_amplitude(*log, 0, 5);
        }
    }
    j["cell"] = cell.stem;
    j["strategy"] = cell.strategy;
    j["seed"] = cell.seed;
    j["ok"] = cell.ok;
    if (!cell.ok) j["error"] = cell.error;
    if (cell.has_sweep) {
        j["sweep_key"] = cfg.sweep_key;
        j["sweep_value"] = cell.sweep_value;
    }
    if (cell.baseline_only) j["baseline_only"] = true;
    if (!std::isnan(cell.ds_ratio)) j["ds_ratio"] = cell.ds_ratio;
    j["mode"] = cfg.mode == run_mode::distributed ? "distributed" : "in_process";
    j["config"] = cfg.echo;
    {
        std::ofstream f(dir / (cell.stem + ".summary.json"), std::ios::binary);
        if (!f)
            throw precondition_error("cannot write summary for cell " + cell.stem);
        f << j.dump(2) << '\n';
    }
    if (log) write_runlog_csv(*log, (dir / (cell.stem + ".runlog.csv")).string());
}

} // namespace detail

// Runs the full experiment grid: for every sweep value and seed, the
// centralized best-of-k baseline first (its score is every other cell's
// ds_ratio denominator), then each configured strategy. Each cell writes a
// step CSV and a JSON summary echoing the config; a failing cell is recorded
// and the remaining cells still run.
inline experiment_result run_experiment(const experiment_config& cfg,
                                        const std::string& out_dir) {
    namespace fs = std::filesystem;
    const fs::path dir(out_dir);
    fs::create_directories(dir);

    experiment_result result;
    const std::size_t sweep_n = cfg.sweep_key.empty() ? 1 : cfg.sweep_values.size();

    const strategy_config* central_cfg = nullptr;
    for (const auto& s : cfg.strategies)
        if (s.kind == strategy_kind::centralized) central_cfg = &s;

    for (std::size_t vi = 0; vi < sweep_n; ++vi) {
        const auto rs = detail::resolve_sweep(cfg, vi);
        for (std::uint64_t seed : cfg.seeds) {
            detail::prepared_data data;
            bool data_ok = true;
            std::string data_err;
            try {
                data = detail::prepare_data(rs, seed);
            } catch (const error& e) {
                data_ok = false;
                data_err = e.what();
            }

            auto make_cell = [&](const std::string& strat, std::uint64_t s) {
                cell_result c;
                c.strategy = strat;
                c.seed = s;
                c.has_sweep = rs.has_sweep;
                c.sweep_value = rs.sweep_value;
                c.stem = rs.prefix + strat + "_s" + std::to_string(s);
                return c;
            };

            // Baseline first: its final score is the ds_ratio denominator for
            // every cell of this (sweep value, seed) pairing.
            strategy_options base_so = central_cfg ? central_cfg->so : cfg.training;
            const std::uint64_t base_seed =
                central_cfg && central_cfg->has_seed ? central_cfg->seed : seed;
            cell_result base_cell = make_cell("centralized", base_seed);
            base_cell.baseline_only = central_cfg == nullptr;
            double baseline_dice = std::numeric_limits<double>::quiet_NaN();
            run_log base_log;
            if (data_ok) {
                try {
                    auto br = run_centralized_best<float>(cfg.model, data.training,
                                                          data.holdout, base_so, base_seed);
                    baseline_dice = br.log.final_dice;
                    br.log.ds_ratio = 1.0;
                    base_cell.ok = true;
                    base_cell.final_dice = br.log.final_dice;
                    base_cell.ds_ratio = 1.0;
                    base_log = std::move(br.log);
                } catch (const error& e) {
                    base_cell.error = e.what();
                }
            } else {
                base_cell.error = data_err;
            }
            detail::write_cell_artifacts(dir, base_cell, base_cell.ok ? &base_log : nullptr,
                                         cfg);
            result.cells.push_back(base_cell);

            for (const auto& sc : cfg.strategies) {
                if (sc.kind == strategy_kind::centralized) continue;
                const std::uint64_t run_seed = sc.has_seed ? sc.seed : seed;
                cell_result cell = make_cell(strategy_kind_name(sc.kind), run_seed);
                if (!data_ok) {
                    cell.error = data_err;
                } else {
                    try {
                        run_result<float> rr =
                            cfg.mode == run_mode::distributed
                                ? detail::run_distributed_cell(sc.kind, cfg.model, data,
                                                               sc.so, run_seed,
                                                               cfg.timeout_ms)
                                : run_strategy<float>(sc.kind, cfg.model, data.training,
                                                      data.shards, data.holdout, sc.so,
                                                      run_seed);
                        if (!std::isnan(baseline_dice) && baseline_dice > 0)
                            rr.log.ds_ratio = rr.log.final_dice / baseline_dice;
                        cell.ok = true;
                        cell.final_dice = rr.log.final_dice;
                        cell.ds_ratio = rr.log.ds_ratio;
                        detail::write_cell_artifacts(dir, cell, &rr.log, cfg);
                    } catch (const error& e) {
                        cell.ok = false;
                        cell.error = e.what();
                    }
                }
                if (!cell.ok) detail::write_cell_artifacts(dir, cell, nullptr, cfg);
                result.cells.push_back(cell);
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace detail {

struct scanned_cell {
    std::string stem;
    std::string strategy;
    std::uint64_t seed = 0;
    bool has_sweep = false;
    double sweep_value = 0;
    std::string sweep_key;
    bool baseline_only = false;
    bool ok = false;
    double final_dice = std::numeric_limits<double>::quiet_NaN();
    double ds_ratio = std::numeric_limits<double>::quiet_NaN();
    double forgetting_w5 = std::numeric_limits<double>::quiet_NaN();
};

inline int strategy_rank(const std::string& s) {
    if (s == "centralized") return 0;
    if (s == "federated") return 1;
    if (s == "ciil") return 2;
    if (s == "iil") return 3;
    return 4;
}

inline std::vector<scanned_cell> scan_cells(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.size() > 13 && name.substr(name.size() - 13) == ".summary.json")
            files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<scanned_cell> cells;
    for (const auto& p : files) {
        std::ifstream f(p);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(f);
        } catch (const nlohmann::json::exception&) {
            continue;
        }
        scanned_cell c;
        c.stem = j.value("cell", p.filename().string());
        c.strategy = j.value("strategy", "");
        c.seed = j.value("seed", std::uint64_t{0});
        c.ok = j.value("ok", false);
        c.baseline_only = j.value("baseline_only", false);
        if (j.contains("sweep_value")) {
            c.has_sweep = true;
            c.sweep_value = j["sweep_value"].get<double>();
            c.sweep_key = j.value("sweep_key", "");
        }
        if (j.contains("final_dice")) c.final_dice = j["final_dice"].get<double>();
        if (j.contains("ds_ratio")) c.ds_ratio = j["ds_ratio"].get<double>();
        if (j.contains("forgetting_amplitude_w5"))
            c.forgetting_w5 = j["forgetting_amplitude_w5"].get<double>();
        cells.push_back(std::move(c));
    }
    return cells;
}

struct report_row {
    bool has_sweep = false;
    double sweep_value = 0;
    std::string sweep_key;
    std::string strategy;
    int seeds = 0;
    int failures = 0;
    double mean_dice = std::numeric_limits<double>::quiet_NaN();
    double std_dice = std::numeric_limits<double>::quiet_NaN();
    double mean_ds = std::numeric_limits<double>::quiet_NaN();
    double std_ds = std::numeric_limits<double>::quiet_NaN();
    double mean_forget = std::numeric_limits<double>::quiet_NaN();
    bool ds_missing = false;
};

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (xs.empty()) return {nan, nan};
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) return {mean, nan};
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size()); // population convention
    return {mean, std::sqrt(var)};
}

inline std::vector<report_row> summarize(const std::vector<scanned_cell>& cells) {
    std::map<std::pair<double, std::string>, std::vector<const scanned_cell*>> groups;
    for (const auto& c : cells) {
        if (c.baseline_only) continue;
        groups[{c.has_sweep ? c.sweep_value : std::numeric_limits<double>::lowest(),
                c.strategy}]
            .push_back(&c);
    }
    std::vector<report_row> rows;
    for (const auto& [key, group] : groups) {
        report_row r;
        r.strategy = key.second;
        r.has_sweep = group.front()->has_sweep;
        r.sweep_value = group.front()->sweep_value;
        r.sweep_key = group.front()->sweep_key;
        std::vector<double> dice, ds, forget;
        for (const auto* c : group) {
            r.seeds++;
            if (!c->ok) {
                r.failures++;
                continue;
            }
            if (!std::isnan(c->final_dice)) dice.push_back(c->final_dice);
            if (!std::isnan(c->ds_ratio))
                ds.push_back(c->ds_ratio);
            else
                r.ds_missing = true;
            if (!std::isnan(c->forgetting_w5)) forget.push_back(c->forgetting_w5);
        }
        std::tie(r.mean_dice, r.std_dice) = mean_std(dice);
        std::tie(r.mean_ds, r.std_ds) = mean_std(ds);
        r.mean_forget = mean_std(forget).first;
        rows.push_back(std::move(r));
    }
    std::sort(rows.begin(), rows.end(), [](const report_row& a, const report_row& b) {
        const double av = a.has_sweep ? a.sweep_value : std::numeric_limits<double>::lowest();
        const double bv = b.has_sweep ? b.sweep_value : std::numeric_limits<double>::lowest();
        if (av != bv) return av < bv;
        return strategy_rank(a.strategy) < strategy_rank(b.strategy);
    });
    return rows;
}

inline std::string fmt(double v, const char* spec_na = "") {
    if (std::isnan(v)) return spec_na;
    return format_double(v);
}

inline std::string fmt_fixed(double v, int digits) {
    if (std::isnan(v)) return "n/a";
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

} // namespace detail

struct report_result {
    bool all_cells_ok = true;
    std::vector<std::string> warnings;
};

// Regenerates report.csv, report.md, and convergence.csv from the artifacts
// in `dir`. Pure function of the artifact files: re-running never changes the
// outputs.
inline report_result emit_report(const std::string& dir_in) {
    namespace fs = std::filesystem;
    const fs::path dir(dir_in);
    if (!fs::exists(dir)) throw precondition_error("no such artifact directory: " + dir_in);
    const auto cells = detail::scan_cells(dir);
    if (cells.empty())
        throw precondition_error("no run summaries (*.summary.json) found in " + dir_in);
    const auto rows = detail::summarize(cells);

    report_result res;
    for (const auto& c : cells)
        if (!c.ok) {
            res.all_cells_ok = false;
            res.warnings.push_back("cell " + c.stem + " failed");
        }
    for (const auto& r : rows)
        if (r.ds_missing)
            res.warnings.push_back("strategy " + r.strategy +
                                   ": missing centralized baseline, ds_ratio is n/a");

    {
        std::ofstream f(dir / "report.csv", std::ios::binary);
        f << "sweep_key,sweep_value,strategy,seeds,failures,mean_final_dice,"
             "std_final_dice,mean_ds_ratio,std_ds_ratio,mean_forgetting_w5\n";
        for (const auto& r : rows) {
            f << (r.has_sweep ? r.sweep_key : "") << ','
              << (r.has_sweep ? detail::value_text(r.sweep_value) : "") << ',' << r.strategy
              << ',' << r.seeds << ',' << r.failures << ',' << detail::fmt(r.mean_dice)
              << ',' << detail::fmt(r.std_dice) << ',' << detail::fmt(r.mean_ds) << ','
              << detail::fmt(r.std_ds) << ',' << detail::fmt(r.mean_forget) << '\n';
        }
    }

    {
        std::ofstream f(dir / "report.md", std::ios::binary);
        f << "# Strategy comparison\n";
        double section = std::numeric_limits<double>::quiet_NaN();
        bool first_section = true;
        for (const auto& r : rows) {
            const double v =
                r.has_sweep ? r.sweep_value : std::numeric_limits<double>::lowest();
            if (first_section || v != section) {
                section = v;
                first_section = false;
                if (r.has_sweep)
                    f << "\n## " << r.sweep_key << " = " << detail::value_text(r.sweep_value)
                      << "\n\n";
                else
                    f << '\n';
                f << "| strategy | final DC (mean ± std) | % of data-sharing DC | "
                     "forgetting (last 5) | seeds | failures |\n";
                f << "|---|---|---|---|---|---|\n";
            }
            f << "| " << r.strategy << " | " << detail::fmt_fixed(r.mean_dice, 4);
            if (!std::isnan(r.std_dice)) f << " ± " << detail::fmt_fixed(r.std_dice, 4);
            f << " | ";
            if (std::isnan(r.mean_ds))
                f << "n/a";
            else {
                f << detail::fmt_fixed(100.0 * r.mean_ds, 1) << "%";
                if (!std::isnan(r.std_ds))
                    f << " ± " << detail::fmt_fixed(100.0 * r.std_ds, 1) << "pp";
            }
            f << " | " << detail::fmt_fixed(r.mean_forget, 4) << " | " << r.seeds << " | "
              << r.failures << " |\n";
        }
        f << "\nStd is the population standard deviation (n divisor) over seeds; n/a "
             "when fewer than 2 seeds.\n";
        for (const auto& w : res.warnings) f << "\nWARNING: " << w << "\n";
    }

    {
        std::ofstream f(dir / "convergence.csv", std::ios::binary);
        f << "sweep_value,strategy,seed,step_kind,step_index,global_val_dice,"
             "inst0_train_dice\n";
        for (const auto& c : cells) {
            if (!c.ok) continue;
            std::ifstream in(dir / (c.stem + ".runlog.csv"));
            if (!in) continue;
            std::string line;
            std::getline(in, line); // header
            while (std::getline(in, line)) {
                std::vector<std::string> cols;
                std::stringstream ss(line);
                std::string col;
                while (std::getline(ss, col, ',')) cols.push_back(col);
                if (cols.size() < 4) continue;
                f << (c.has_sweep ? detail::value_text(c.sweep_value) : "") << ','
                  << c.strategy << ',' << c.seed << ',' << cols[0] << ',' << cols[1] << ','
                  << cols[2] << ',' << cols[3] << '\n';
            }
        }
    }

    return res;
}

} // namespace fedseg
