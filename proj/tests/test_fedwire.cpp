#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <exception>
#include <future>
#include <mutex>
#include <thread>
#include <vector>

#include <fedseg/fedwire.hpp>
#include <fedseg/strategies.hpp>

#include "helpers.hpp"

using namespace fedseg;
using namespace testutil;

namespace {

model_spec tiny_model() {
    model_spec ms;
    ms.kind = "mini_unet";
    ms.base_channels = 2;
    ms.depth = 1;
    ms.dropout = 0.1;
    return ms;
}

struct tiny_world {
    std::vector<subject> training;
    std::vector<subject> holdout;
    std::vector<institution_shard> shards;
};

tiny_world make_world(int subjects, int institutions, std::uint64_t seed) {
    tiny_world w;
    auto cohort = generate_cohort(subjects, {generation_profile{}}, seed, 2, 20, 20);
    partition_scheme scheme;
    scheme.kind = partition_kind::simulated_balanced;
    scheme.institutions = institutions;
    scheme.holdout_count = 2;
    std::tie(w.training, w.holdout) = split_holdout(cohort, scheme, seed);
    w.shards = partition(w.training, scheme, seed);
    return w;
}

struct loopback_result {
    run_result<float> aggregator;
    std::vector<run_result<float>> collaborators;
};

// Runs an aggregator and one collaborator thread per shard on localhost.
loopback_result run_loopback(strategy_kind kind, const strategy_options& so,
                             const model_spec& ms, const tiny_world& w,
                             std::uint64_t seed,
                             const std::vector<model_spec>* collab_ms = nullptr) {
    loopback_result out;
    out.collaborators.resize(w.shards.size());

    serve_options srv;
    srv.kind = kind;
    srv.so = so;
    srv.ms = ms;
    srv.seed = seed;
    srv.institutions = static_cast<int>(w.shards.size());
    srv.timeout_ms = 30000;
    std::promise<std::uint16_t> port_promise;
    auto port_future = port_promise.get_future();
    srv.on_listening = [&](std::uint16_t p) { port_promise.set_value(p); };

    std::exception_ptr agg_error, collab_error;
    std::mutex collab_mutex;
    std::thread agg([&] {
        try {
            out.aggregator = aggregator_serve(srv);
        } catch (...) {
            agg_error = std::current_exception();
            try {
                port_promise.set_value(0);
            } catch (...) {
            }
        }
    });

    const std::uint16_t port = port_future.get();
    std::vector<std::thread> collabs;
    if (port != 0) {
        for (std::size_t i = 0; i < w.shards.size(); ++i)
            collabs.emplace_back([&, i] {
                collaborate_options co;
                co.port = port;
                co.institution_id = w.shards[i].institution_id;
                co.ms = collab_ms ? (*collab_ms)[i] : ms;
                co.batch_size = so.batch_size;
                co.optimizer = so.optimizer;
                co.learning_rate = so.learning_rate;
                co.seed = seed;
                co.timeout_ms = 30000;
                try {
                    out.collaborators[i] = collaborator_run(co, w.shards[i]);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(collab_mutex);
                    if (!collab_error) collab_error = std::current_exception();
                }
            });
    }
    for (auto& t : collabs) t.join();
    agg.join();
    if (agg_error) std::rethrow_exception(agg_error);
    if (collab_error) std::rethrow_exception(collab_error);
    return out;
}

strategy_options fast_options() {
    strategy_options so;
    so.batch_size = 8;
    so.record_wall_time = false;
    return so;
}

} // namespace

TEST_CASE("federated rounds over sockets match the in-process run bitwise") {
    auto w = make_world(8, 2, 201);
    auto so = fast_options();
    so.rounds = 2;

    const auto wire = run_loopback(strategy_kind::federated, so, tiny_model(), w, 77);
    const auto local = run_federated<float>(tiny_model(), w.shards, w.holdout, so, 77);

    CHECK(wire.aggregator.params.values == local.params.values);
    CHECK(wire.aggregator.log.final_params_crc == local.log.final_params_crc);
    REQUIRE(wire.aggregator.log.steps.size() == local.log.steps.size());
    for (std::size_t i = 0; i < local.log.steps.size(); ++i)
        CHECK(wire.aggregator.log.steps[i].params_crc == local.log.steps[i].params_crc);

    // every collaborator walks away with the same final parameters
    for (const auto& c : wire.collaborators)
        CHECK(c.params.values == local.params.values);
}

TEST_CASE("cyclic transfer over sockets matches the in-process run bitwise") {
    auto w = make_world(8, 3, 203);
    auto so = fast_options();
    so.cycles = 2;
    so.epochs_per_cycle_stop = 1;

    const auto wire = run_loopback(strategy_kind::ciil, so, tiny_model(), w, 31);
    const auto local = run_ciil<float>(tiny_model(), w.shards, w.holdout, so, 31);

    CHECK(wire.aggregator.params.values == local.params.values);
    CHECK(wire.aggregator.log.final_params_crc == local.log.final_params_crc);
}

TEST_CASE("single-pass transfer over sockets matches the in-process run bitwise") {
    auto w = make_world(9, 3, 205);
    auto so = fast_options();
    so.patience = 1;
    so.max_epochs_per_visit = 4;

    const auto wire = run_loopback(strategy_kind::iil, so, tiny_model(), w, 41);
    const auto local = run_iil<float>(tiny_model(), w.shards, w.holdout, so, 41);

    CHECK(wire.aggregator.params.values == local.params.values);
    CHECK(wire.aggregator.log.final_params_crc == local.log.final_params_crc);

    // the relay records who trained and for how long, in visit order
    REQUIRE(wire.collaborators.size() == w.shards.size());
    std::size_t wire_visits = 0;
    for (const auto& c : wire.collaborators) wire_visits += c.log.visits.size();
    CHECK(wire_visits == local.log.visits.size());
}

TEST_CASE("aggregator validation scores are the collaborators' own sweeps") {
    auto w = make_world(8, 2, 207);
    auto so = fast_options();
    so.rounds = 2;

    const auto wire = run_loopback(strategy_kind::federated, so, tiny_model(), w, 99);

    std::vector<std::vector<double>> per_collab(w.shards.size());
    std::vector<std::uint64_t> val_counts(w.shards.size());
    for (std::size_t i = 0; i < w.shards.size(); ++i) {
        val_counts[i] = w.shards[i].val_slice_count();
        for (const auto& s : wire.collaborators[i].log.steps)
            if (s.kind == "val") {
                // a collaborator only ever sees its own sweep
                REQUIRE(s.per_inst_val_dice.size() == 1);
                per_collab[i].push_back(s.per_inst_val_dice[0]);
            }
    }

    std::size_t sweep_index = 0;
    for (const auto& s : wire.aggregator.log.steps) {
        if (s.kind != "round") continue;
        REQUIRE(s.per_inst_val_dice.size() == w.shards.size());
        double num = 0, den = 0;
        for (std::size_t i = 0; i < w.shards.size(); ++i) {
            REQUIRE(sweep_index < per_collab[i].size());
            CHECK(s.per_inst_val_dice[i] == per_collab[i][sweep_index]);
            num += s.per_inst_val_dice[i] * static_cast<double>(val_counts[i]);
            den += static_cast<double>(val_counts[i]);
        }
        CHECK(s.global_val_dice == Catch::Approx(num / den).margin(1e-12));
        ++sweep_index;
    }
    CHECK(sweep_index == 2);
}

TEST_CASE("a collaborator built on a different topology refuses the task") {
    auto w = make_world(6, 2, 209);
    auto so = fast_options();
    so.rounds = 1;

    model_spec other = tiny_model();
    other.base_channels = 4;
    std::vector<model_spec> mixed = {tiny_model(), other};

    CHECK_THROWS_AS(run_loopback(strategy_kind::federated, so, tiny_model(), w, 1, &mixed),
                    fedseg::error);
}

TEST_CASE("serving rejects configurations that cannot travel") {
    serve_options srv;
    srv.ms = tiny_model();
    srv.institutions = 2;

    srv.kind = strategy_kind::centralized;
    CHECK_THROWS_AS(aggregator_serve(srv), config_error);

    srv.kind = strategy_kind::federated;
    srv.so.moments = adam_policy::aggregate_moments;
    CHECK_THROWS_AS(aggregator_serve(srv), config_error);

    srv.so.moments = adam_policy::keep_local;
    srv.kind = strategy_kind::ciil;
    srv.so.reset_moments_on_handoff = false;
    CHECK_THROWS_AS(aggregator_serve(srv), config_error);

    srv.kind = strategy_kind::federated;
    srv.institutions = 0;
    srv.so.reset_moments_on_handoff = true;
    CHECK_THROWS_AS(aggregator_serve(srv), config_error);
}

TEST_CASE("duplicate institution ids abort the whole cohort") {
    auto w = make_world(6, 2, 211);
    // both collaborators claim id 0
    auto shards = w.shards;
    shards[1].institution_id = 0;
    auto w2 = w;
    w2.shards = shards;

    auto so = fast_options();
    so.rounds = 1;
    CHECK_THROWS_AS(run_loopback(strategy_kind::federated, so, tiny_model(), w2, 1),
                    fedseg::error);
}
