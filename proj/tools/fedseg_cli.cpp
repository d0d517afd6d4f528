#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "fedseg/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedseg;

namespace {

struct host_port {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
};

host_port parse_host_port(const std::string& s) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos)
        throw config_error("address '" + s + "' must look like HOST:PORT");
    host_port hp;
    if (colon > 0) hp.host = s.substr(0, colon);
    const auto port_text = s.substr(colon + 1);
    try {
        const int p = std::stoi(port_text);
        if (p < 0 || p > 65535) throw std::out_of_range("port");
        hp.port = static_cast<std::uint16_t>(p);
    } catch (const std::exception&) {
        throw config_error("bad port in address '" + s + "'");
    }
    return hp;
}

// Parameter files share the wire encoding: u64 count LE, then float32 LE.
void write_params_file(const std::string& path, const std::vector<float>& params) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw config_error("cannot open " + path + " for writing");
    std::vector<std::uint8_t> bytes;
    fedseg::detail::put_params(bytes, params);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::string default_out_dir(const experiment_config& cfg) {
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    return "runs/" + cfg.name;
}

void apply_overrides(experiment_config& cfg, bool seed_set, std::uint64_t seed,
                     const std::string& mode) {
    if (seed_set) cfg.seeds = {seed};
    if (!mode.empty()) {
        if (mode == "in_process")
            cfg.mode = run_mode::in_process;
        else if (mode == "distributed")
            cfg.mode = run_mode::distributed;
        else
            throw config_error("--mode must be in_process or distributed");
        validate_mode_constraints(cfg);
    }
}

// The cohort/partition a config describes for one master seed, materialized
// the same way `run` does it.
fedseg::detail::prepared_data prepare_from_config(const experiment_config& cfg,
                                                  std::uint64_t seed) {
    const auto rs = fedseg::detail::resolve_sweep(cfg, 0);
    return fedseg::detail::prepare_data(rs, seed);
}

const strategy_config& pick_strategy(const experiment_config& cfg,
                                     const std::string& name) {
    if (!name.empty()) {
        std::string n = name == "fl" ? "federated" : name;
        for (const auto& s : cfg.strategies)
            if (strategy_kind_name(s.kind) == n) return s;
        throw config_error("config has no strategy '" + name + "'");
    }
    for (const auto& s : cfg.strategies)
        if (s.kind != strategy_kind::centralized) return s;
    throw config_error("config has no collaborative strategy to serve");
}

int cmd_run(const std::string& config_path, bool seed_set, std::uint64_t seed,
            const std::string& mode, std::string out) {
    experiment_config cfg = load_config(config_path);
    apply_overrides(cfg, seed_set, seed, mode);
    if (out.empty()) out = default_out_dir(cfg);

    const auto result = run_experiment(cfg, out);
    for (const auto& c : result.cells) {
        std::cout << (c.ok ? "ok   " : "FAIL ") << c.stem;
        if (c.ok) {
            std::cout << "  final_dice=" << fedseg::detail::format_double(c.final_dice);
            if (!std::isnan(c.ds_ratio))
                std::cout << "  ds_ratio=" << fedseg::detail::format_double(c.ds_ratio);
        } else {
            std::cout << "  " << c.error;
        }
        std::cout << '\n';
    }
    const auto rep = emit_report(out);
    for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << "report: " << (fs::path(out) / "report.md").string() << '\n';
    return result.all_ok() ? 0 : 1;
}

int cmd_report(const std::string& dir) {
    const auto rep = emit_report(dir);
    for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << "report: " << (fs::path(dir) / "report.md").string() << '\n';
    return rep.all_cells_ok ? 0 : 1;
}

int cmd_cohort_generate(const std::string& config_path, std::uint64_t seed,
                        const std::string& out) {
    const experiment_config cfg = load_config(config_path);
    const auto rs = fedseg::detail::resolve_sweep(cfg, 0);
    const auto profiles = fedseg::detail::resolve_profiles(rs.cohort, rs.scheme);
    const auto cohort =
        generate_cohort(rs.cohort.subjects, profiles, derive_seed(seed, "cohort"),
                        rs.cohort.slices_per_subject, rs.cohort.height, rs.cohort.width);
    cohort_file cf;
    cf.height = rs.cohort.height;
    cf.width = rs.cohort.width;
    cf.subjects = cohort;
    cf.val_flag.assign(cohort.size(), 0);
    write_cohort_file(out, cf);
    std::cout << "wrote " << out << " (" << cohort.size() << " subjects)\n";
    return 0;
}

int cmd_cohort_export(const std::string& config_path, std::uint64_t seed,
                      const std::string& out_dir) {
    const experiment_config cfg = load_config(config_path);
    const auto data = prepare_from_config(cfg, seed);
    fs::create_directories(out_dir);

    auto shard_file = [&](const institution_shard& sh) {
        cohort_file cf;
        cf.height = cfg.cohort.height;
        cf.width = cfg.cohort.width;
        for (const auto& s : sh.train_subjects) {
            cf.subjects.push_back(s);
            cf.val_flag.push_back(0);
        }
        for (const auto& s : sh.val_subjects) {
            cf.subjects.push_back(s);
            cf.val_flag.push_back(1);
        }
        return cf;
    };
    for (const auto& sh : data.shards) {
        const auto path =
            (fs::path(out_dir) / ("shard_" + std::to_string(sh.institution_id) + ".coht"))
                .string();
        write_cohort_file(path, shard_file(sh));
        std::cout << "wrote " << path << " (" << sh.train_subjects.size() << " train + "
                  << sh.val_subjects.size() << " val subjects)\n";
    }
    cohort_file hold;
    hold.height = cfg.cohort.height;
    hold.width = cfg.cohort.width;
    hold.subjects = data.holdout;
    hold.val_flag.assign(data.holdout.size(), 1);
    const auto hold_path = (fs::path(out_dir) / "holdout.coht").string();
    write_cohort_file(hold_path, hold);
    std::cout << "wrote " << hold_path << " (" << data.holdout.size() << " subjects)\n";
    return 0;
}

int cmd_serve(const std::string& config_path, const std::string& listen, bool seed_set,
              std::uint64_t seed, const std::string& strategy_name,
              const std::string& out_dir) {
    experiment_config cfg = load_config(config_path);
    const auto& sc = pick_strategy(cfg, strategy_name);
    const std::uint64_t master =
        seed_set ? seed : (sc.has_seed ? sc.seed : cfg.seeds.front());

    serve_options srv;
    const auto hp = parse_host_port(listen);
    srv.host = hp.host;
    srv.port = hp.port;
    srv.institutions = cfg.partition.institution_count();
    srv.timeout_ms = cfg.timeout_ms;
    srv.kind = sc.kind;
    srv.so = sc.so;
    srv.ms = cfg.model;
    srv.seed = master;
    srv.on_listening = [](std::uint16_t p) {
        std::cout << "listening on port " << p << std::endl;
    };

    const auto result = aggregator_serve(srv);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_params_file((fs::path(out_dir) / "final_params.bin").string(),
                          result.params.values);
        write_runlog_csv(result.log,
                         (fs::path(out_dir) / "aggregator.runlog.csv").string());
        write_run_summary_json(result.log,
                               (fs::path(out_dir) / "aggregator.summary.json").string(),
                               &cfg.echo);
    }
    std::cout << "session complete; final params crc32 "
              << fedseg::detail::format_crc(result.log.final_params_crc) << '\n';
    return 0;
}

int cmd_collaborate(const std::string& config_path, std::string connect, int institution_id,
                    bool seed_set, std::uint64_t seed, const std::string& shard_path,
                    const std::string& out_dir) {
    experiment_config cfg = load_config(config_path);
    if (const char* env = std::getenv("FEDSEG_CONNECT"); env && *env) connect = env;
    if (connect.empty())
        throw config_error("no aggregator address: pass --connect or set FEDSEG_CONNECT");
    const auto hp = parse_host_port(connect);
    const std::uint64_t master = seed_set ? seed : cfg.seeds.front();

    institution_shard shard;
    if (!shard_path.empty()) {
        shard = shard_from_file(read_cohort_file(shard_path), institution_id);
    } else {
        const auto data = prepare_from_config(cfg, master);
        bool found = false;
        for (const auto& sh : data.shards)
            if (sh.institution_id == institution_id) {
                shard = sh;
                found = true;
            }
        if (!found)
            throw config_error("config partition has no institution " +
                               std::to_string(institution_id));
    }

    collaborate_options co;
    co.host = hp.host;
    co.port = hp.port;
    co.institution_id = institution_id;
    co.ms = cfg.model;
    const auto& sc = pick_strategy(cfg, "");
    co.batch_size = sc.so.batch_size;
    co.optimizer = sc.so.optimizer;
    co.learning_rate = sc.so.learning_rate;
    co.seed = master;
    co.timeout_ms = cfg.timeout_ms;

    const auto result = collaborator_run(co, shard);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        const auto stem = "collaborator_" + std::to_string(institution_id);
        write_params_file((fs::path(out_dir) / (stem + ".final_params.bin")).string(),
                          result.params.values);
        write_runlog_csv(result.log, (fs::path(out_dir) / (stem + ".runlog.csv")).string());
    }
    std::cout << "final model received; params crc32 "
              << fedseg::detail::format_crc(result.log.final_params_crc) << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Collaborative segmentation training harness"};
    app.require_subcommand(1);

    std::string config_path, mode, out, listen = "127.0.0.1:0", connect, strategy,
                              shard_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int institution_id = -1;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "master seed override")
            ->each([&](const std::string&) { seed_set = true; });
    };

    auto* run = app.add_subcommand("run", "run the experiment grid from a config");
    run->add_option("--config", config_path, "experiment config (JSON)")->required();
    add_seed(run);
    run->add_option("--mode", mode, "in_process or distributed");
    run->add_option("--out", out, "artifact output directory");

    auto* report = app.add_subcommand("report", "regenerate reports from artifacts");
    report->add_option("--out,dir", out, "artifact directory")->required();

    auto* cohort = app.add_subcommand("cohort", "synthetic cohort tooling");
    cohort->require_subcommand(1);
    auto* gen = cohort->add_subcommand("generate", "write the full cohort to one file");
    gen->add_option("--config", config_path, "experiment config (JSON)")->required();
    add_seed(gen);
    gen->add_option("--out", out, "output cohort file")->required();
    auto* exp = cohort->add_subcommand("export", "write per-institution shard files");
    exp->add_option("--config", config_path, "experiment config (JSON)")->required();
    add_seed(exp);
    exp->add_option("--out", out, "output directory")->required();

    auto* serve = app.add_subcommand("serve", "run the aggregator side of a session");
    serve->add_option("--config", config_path, "experiment config (JSON)")->required();
    serve->add_option("--listen", listen, "listen address HOST:PORT (port 0 = ephemeral)");
    add_seed(serve);
    serve->add_option("--strategy", strategy, "which configured strategy to serve");
    serve->add_option("--out", out, "directory for final params and logs");

    auto* collab = app.add_subcommand("collaborate", "run one institution's client");
    collab->add_option("--config", config_path, "experiment config (JSON)")->required();
    collab->add_option("--connect", connect, "aggregator address HOST:PORT");
    collab->add_option("--institution-id", institution_id, "this institution's id")
        ->required();
    add_seed(collab);
    collab->add_option("--shard", shard_path, "pre-exported shard file (.coht)");
    collab->add_option("--out", out, "directory for final params and logs");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, seed_set, seed, mode, out);
        if (report->parsed()) return cmd_report(out);
        if (cohort->parsed()) {
            const std::uint64_t s = seed_set ? seed : 1;
            if (gen->parsed()) return cmd_cohort_generate(config_path, s, out);
            if (exp->parsed()) return cmd_cohort_export(config_path, s, out);
        }
        if (serve->parsed())
            return cmd_serve(config_path, listen, seed_set, seed, strategy, out);
        if (collab->parsed())
            return cmd_collaborate(config_path, connect, institution_id, seed_set, seed,
                                   shard_path, out);
    } catch (const fedseg::error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
