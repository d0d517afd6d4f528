#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "fedseg/model.hpp"
#include "fedseg/runlog.hpp"

namespace fedseg {

enum class strategy_kind { centralized, federated, ciil, iil };

inline const char* strategy_kind_name(strategy_kind k) {
    switch (k) {
        case strategy_kind::centralized: return "centralized";
        case strategy_kind::federated: return "federated";
        case strategy_kind::ciil: return "ciil";
        case strategy_kind::iil: return "iil";
    }
    return "?";
}

inline strategy_kind strategy_kind_from(const std::string& name) {
    if (name == "centralized") return strategy_kind::centralized;
    if (name == "federated") return strategy_kind::federated;
    if (name == "ciil") return strategy_kind::ciil;
    if (name == "iil") return strategy_kind::iil;
    throw config_error("unknown strategy '" + name + "'");
}

// What happens to Adam moments when work moves between institutions.
enum class adam_policy { keep_local, reset_each_round, aggregate_moments };

inline adam_policy adam_policy_from(const std::string& name) {
    if (name == "keep_local") return adam_policy::keep_local;
    if (name == "reset_each_round") return adam_policy::reset_each_round;
    if (name == "aggregate_moments") return adam_policy::aggregate_moments;
    throw config_error("unknown adam_policy '" + name + "'");
}

// Visit ordering for the weight-passing strategies.
enum class visit_order { fixed_desc, fixed_asc, seeded_shuffle_per_cycle };

inline visit_order visit_order_from(const std::string& name) {
    if (name == "fixed_desc") return visit_order::fixed_desc;
    if (name == "fixed_asc") return visit_order::fixed_asc;
    if (name == "seeded_shuffle_per_cycle") return visit_order::seeded_shuffle_per_cycle;
    throw config_error("unknown institution_order '" + name + "'");
}

// One institution's contribution to a federated aggregation round.
template <class T>
struct model_update {
    int institution_id = 0;
    int round_index = 0;
    std::uint64_t n_samples = 0;
    std::vector<T> params;
};

// Sample-count-weighted average of parameter vectors. Updates are sorted by
// institution id and each coordinate is accumulated as sum(n_k * v_k) in
// double, divided by N once, then rounded to T: the result does not depend
// on the order updates arrived in, and unanimous inputs are returned bit for
// bit (n_k * v sums to exactly N * v).
template <class T>
std::vector<T> aggregate_weighted(std::vector<model_update<T>> updates) {
    if (updates.empty()) throw precondition_error("aggregate_weighted: no updates");
    std::sort(updates.begin(), updates.end(),
              [](const auto& a, const auto& b) { return a.institution_id < b.institution_id; });
    const std::size_t dim = updates.front().params.size();
    const int round = updates.front().round_index;
    double total = 0;
    for (std::size_t i = 0; i < updates.size(); ++i) {
        const auto& u = updates[i];
        if (i > 0 && u.institution_id == updates[i - 1].institution_id)
            throw precondition_error("aggregate_weighted: duplicate institution id " +
                                     std::to_string(u.institution_id));
        if (u.params.size() != dim)
            throw protocol_error("aggregate_weighted: parameter manifest mismatch from "
                                 "institution " +
                                 std::to_string(u.institution_id));
        if (u.round_index != round)
            throw protocol_error("aggregate_weighted: updates from mixed rounds (" +
                                 std::to_string(round) + " and " +
                                 std::to_string(u.round_index) + ")");
        if (u.n_samples == 0)
            throw precondition_error("aggregate_weighted: institution " +
                                     std::to_string(u.institution_id) +
                                     " reports zero samples");
        total += static_cast<double>(u.n_samples);
    }
    std::vector<double> acc(dim, 0.0);
    for (const auto& u : updates) {
        const double w = static_cast<double>(u.n_samples);
        for (std::size_t i = 0; i < dim; ++i) acc[i] += w * static_cast<double>(u.params[i]);
    }
    std::vector<T> out(dim);
    for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<T>(acc[i] / total);
    return out;
}

// Peak-to-trough oscillation of a metric track: max - min.
inline double forgetting_amplitude(const std::vector<double>& track) {
    if (track.empty()) return std::numeric_limits<double>::quiet_NaN();
    const auto [lo, hi] = std::minmax_element(track.begin(), track.end());
    return *hi - *lo;
}

// Institution training-score track across logged steps. Only institution 0
// is tracked by the runners.
inline std::vector<double> inst_train_track(const run_log& log, int institution_id) {
    if (institution_id != 0)
        throw query_error("only institution 0's training track is recorded");
    std::vector<double> track;
    for (const auto& s : log.steps)
        if (!std::isnan(s.inst0_train_dice)) track.push_back(s.inst0_train_dice);
    return track;
}

// Oscillation of an institution's training score over the last `window`
// recorded points (all points when window < 0).
inline double forgetting_amplitude(const run_log& log, int institution_id,
                                   int window = -1) {
    auto track = inst_train_track(log, institution_id);
    if (track.empty())
        throw query_error("run log has no institution-" + std::to_string(institution_id) +
                          " training track");
    if (window >= 0 && static_cast<std::size_t>(window) < track.size())
        track.erase(track.begin(), track.end() - window);
    return forgetting_amplitude(track);
}

// Shared knobs across strategies; each runner reads the subset it needs.
struct strategy_options {
    int epochs = 20;                // centralized
    int rounds = 20;                // federated
    int epochs_per_round = 1;       // federated
    int worker_threads = 1;         // federated local training parallelism
    adam_policy moments = adam_policy::keep_local; // federated
    int cycles = 10;                // ciil
    int epochs_per_cycle_stop = 1;  // ciil
    int patience = 8;               // iil
    int max_epochs_per_visit = 200; // iil cap
    visit_order order = visit_order::fixed_desc; // iil/ciil
    bool reset_moments_on_handoff = true;        // iil/ciil
    int batch_size = 64;
    opt_kind optimizer = opt_kind::adam;
    double learning_rate = 5e-4;
    bool record_wall_time = true;
    bool track_inst0 = true;
    int inst0_eval_cap = 80; // slices of institution 0 scored for the forgetting track
    bool track_local_val = false;   // per-institution local-val scores per step
    bool track_train_dice = false;  // per-epoch train score inside visits
    int baseline_inits = 3;         // centralized best-of-k initializations
};

template <class T>
struct run_result {
    flat_params<T> params;
    run_log log;
};

namespace detail {

class step_clock {
public:
    explicit step_clock(bool enabled) : enabled_(enabled) { reset(); }

    void reset() { start_ = std::chrono::steady_clock::now(); }

    long long elapsed_ms() const {
        if (!enabled_) return -1;
        const auto d = std::chrono::steady_clock::now() - start_;
        return std::chrono::duration_cast<std::chrono::milliseconds>(d).count();
    }

private:
    bool enabled_;
    std::chrono::steady_clock::time_point start_;
};

template <class T>
struct run_context {
    const std::vector<institution_shard>& shards;
    const strategy_options& so;
    std::vector<const seg_sample*> holdout_slices;
    std::vector<const seg_sample*> inst0_slices;

    run_context(const std::vector<institution_shard>& sh,
                const std::vector<subject>& holdout, const strategy_options& opts)
        : shards(sh), so(opts) {
        if (sh.empty()) throw precondition_error("strategy run: no institutions");
        holdout_slices = institution_shard::flatten(holdout);
        if (so.track_inst0) {
            for (const auto& s : sh)
                if (s.institution_id == 0) {
                    auto all = s.train_slices();
                    const std::size_t cap = std::min(
                        all.size(), static_cast<std::size_t>(std::max(0, so.inst0_eval_cap)));
                    inst0_slices.assign(all.begin(), all.begin() + cap);
                    break;
                }
        }
    }

    template <class Model>
    run_step score(const Model& m, const std::string& kind, int index,
                   const step_clock& clock, bool global_eval = true,
                   bool inst0_eval = true) const {
        run_step s;
        s.kind = kind;
        s.index = index;
        if (global_eval && !holdout_slices.empty())
            s.global_val_dice = evaluate(m.net, m.params, holdout_slices);
        if (inst0_eval && !inst0_slices.empty())
            s.inst0_train_dice = evaluate(m.net, m.params, inst0_slices);
        if (so.track_local_val) {
            for (const auto& sh : shards) {
                const auto val = sh.val_slices();
                s.per_inst_val_dice.push_back(
                    val.empty() ? std::numeric_limits<double>::quiet_NaN()
                                : evaluate(m.net, m.params, val));
            }
        }
        s.wall_ms = clock.elapsed_ms();
        s.params_crc = params_crc32(m.params.values);
        return s;
    }
};

inline std::uint64_t visit_seed(std::uint64_t master, int round, int institution) {
    return derive_seed(derive_seed(master, "round", static_cast<std::uint64_t>(round)),
                       "inst", static_cast<std::uint64_t>(institution));
}

template <class T>
void finish(run_result<T>& r, const trainable_model<T>& m, const run_context<T>& ctx) {
    r.params = m.params;
    r.log.final_params_crc = params_crc32(m.params.values);
    if (!r.log.steps.empty() && !std::isnan(r.log.steps.back().global_val_dice))
        r.log.final_dice = r.log.steps.back().global_val_dice;
    else if (!ctx.holdout_slices.empty())
        r.log.final_dice = evaluate(m.net, m.params, ctx.holdout_slices);
}

// Visit order for one pass, as positions into parallel (count, id) arrays.
// Size ties break on the lower institution id, keeping every policy
// deterministic; the shuffle policy reseeds per pass.
inline std::vector<std::size_t> visit_positions(const std::vector<std::uint64_t>& counts,
                                                const std::vector<int>& ids,
                                                visit_order order, std::uint64_t seed,
                                                int pass) {
    std::vector<std::size_t> idx(ids.size());
    std::iota(idx.begin(), idx.end(), 0);
    switch (order) {
        case visit_order::fixed_desc:
            std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                if (counts[a] != counts[b]) return counts[a] > counts[b];
                return ids[a] < ids[b];
            });
            break;
        case visit_order::fixed_asc:
            std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                if (counts[a] != counts[b]) return counts[a] < counts[b];
                return ids[a] < ids[b];
            });
            break;
        case visit_order::seeded_shuffle_per_cycle: {
            rng_stream rng(derive_seed(seed, "order", static_cast<std::uint64_t>(pass)));
            rng.shuffle(idx.begin(), idx.end());
            break;
        }
    }
    return idx;
}

inline std::vector<std::size_t> pass_order(const std::vector<institution_shard>& shards,
                                           visit_order order, std::uint64_t seed,
                                           int pass) {
    std::vector<std::uint64_t> counts;
    std::vector<int> ids;
    for (const auto& s : shards) {
        counts.push_back(s.train_slice_count());
        ids.push_back(s.institution_id);
    }
    return visit_positions(counts, ids, order, seed, pass);
}

} // namespace detail

// Data-sharing baseline: all training subjects are pooled into one dataset
// and trained centrally for a fixed number of epochs, scored on the global
// holdout after each epoch.
template <class T>
run_result<T> run_centralized(const model_spec& ms, const std::vector<subject>& training,
                              const std::vector<subject>& holdout,
                              const strategy_options& so, std::uint64_t seed) {
    const auto pooled = institution_shard::flatten(training);
    if (pooled.empty()) throw precondition_error("run_centralized: no training slices");
    const auto hold = institution_shard::flatten(holdout);

    trainable_model<T> m(ms);
    m.init(seed);
    m.opt.kind = so.optimizer;
    m.opt.learning_rate = so.learning_rate;

    run_result<T> r;
    r.log.strategy = strategy_kind_name(strategy_kind::centralized);
    r.log.seed = seed;
    for (int e = 0; e < so.epochs; ++e) {
        detail::step_clock clock(so.record_wall_time);
        rng_stream rng(detail::visit_seed(seed, e, 0));
        train_epoch(m, pooled, so.batch_size, rng);
        run_step s;
        s.kind = "epoch";
        s.index = e;
        if (!hold.empty()) s.global_val_dice = evaluate(m.net, m.params, hold);
        s.wall_ms = clock.elapsed_ms();
        s.params_crc = params_crc32(m.params.values);
        r.log.steps.push_back(s);
    }
    r.params = m.params;
    r.log.final_params_crc = params_crc32(m.params.values);
    if (!r.log.steps.empty() && !std::isnan(r.log.steps.back().global_val_dice))
        r.log.final_dice = r.log.steps.back().global_val_dice;
    else if (!hold.empty())
        r.log.final_dice = evaluate(m.net, m.params, hold);
    return r;
}

// Best-of-k centralized baseline: k independent runs from derived
// initializations (the first being the plain `seed` run), keeping the run
// with the highest final score.
template <class T>
run_result<T> run_centralized_best(const model_spec& ms,
                                   const std::vector<subject>& training,
                                   const std::vector<subject>& holdout,
                                   const strategy_options& so, std::uint64_t seed) {
    const int inits = std::max(1, so.baseline_inits);
    run_result<T> best;
    bool have = false;
    for (int i = 0; i < inits; ++i) {
        const std::uint64_t s =
            i == 0 ? seed : derive_seed(seed, "baseline-init", static_cast<std::uint64_t>(i));
        auto r = run_centralized<T>(ms, training, holdout, so, s);
        if (!have || r.log.final_dice > best.log.final_dice) {
            best = std::move(r);
            have = true;
        }
    }
    return best;
}

// Federated averaging: each round, every institution trains a replica of the
// broadcast model on its own shard for epochs_per_round epochs, and the
// shared parameters become the sample-count-weighted mean of the returned
// replicas. Local training within a round may run on several worker threads;
// results are bitwise independent of the thread count because every replica
// draws from its own derived stream.
template <class T>
run_result<T> run_federated(const model_spec& ms,
                            const std::vector<institution_shard>& shards,
                            const std::vector<subject>& holdout,
                            const strategy_options& so, std::uint64_t seed) {
    detail::run_context<T> ctx(shards, holdout, so);
    trainable_model<T> m(ms);
    m.init(seed);
    m.opt.kind = so.optimizer;
    m.opt.learning_rate = so.learning_rate;

    std::vector<std::vector<const seg_sample*>> train(shards.size());
    for (std::size_t i = 0; i < shards.size(); ++i) {
        train[i] = shards[i].train_slices();
        if (train[i].empty())
            throw precondition_error("run_federated: institution " +
                                     std::to_string(shards[i].institution_id) +
                                     " has no training slices");
    }
    std::vector<optimizer_state<T>> carried(shards.size(), m.opt);

    run_result<T> r;
    r.log.strategy = strategy_kind_name(strategy_kind::federated);
    r.log.seed = seed;
    const int threads = std::max(1, so.worker_threads);

    for (int round = 0; round < so.rounds; ++round) {
        detail::step_clock clock(so.record_wall_time);
        const std::vector<T> base = m.params.values;
        std::vector<model_update<T>> updates(shards.size());

        auto local_train = [&](std::size_t i) {
            trainable_model<T> replica(ms);
            replica.params.values = base;
            if (so.moments == adam_policy::reset_each_round) {
                replica.opt.kind = so.optimizer;
                replica.opt.learning_rate = so.learning_rate;
            } else {
                replica.opt = carried[i];
            }
            rng_stream rng(detail::visit_seed(seed, round, shards[i].institution_id));
            for (int e = 0; e < so.epochs_per_round; ++e)
                train_epoch(replica, train[i], so.batch_size, rng);
            carried[i] = std::move(replica.opt);
            updates[i] = {shards[i].institution_id, round, train[i].size(),
                          std::move(replica.params.values)};
        };

        if (threads <= 1 || shards.size() <= 1) {
            for (std::size_t i = 0; i < shards.size(); ++i) local_train(i);
        } else {
            std::vector<std::thread> pool;
            std::atomic<std::size_t> next{0};
            const int n = std::min<std::size_t>(threads, shards.size());
            for (int t = 0; t < n; ++t)
                pool.emplace_back([&] {
                    for (;;) {
                        const std::size_t i = next.fetch_add(1);
                        if (i >= shards.size()) return;
                        local_train(i);
                    }
                });
            for (auto& th : pool) th.join();
        }

        if (so.moments == adam_policy::aggregate_moments) {
            std::vector<model_update<T>> fm(shards.size()), sm(shards.size());
            double steps_num = 0, weight_sum = 0;
            for (std::size_t i = 0; i < shards.size(); ++i) {
                fm[i] = {shards[i].institution_id, round, updates[i].n_samples,
                         carried[i].first_moment};
                sm[i] = {shards[i].institution_id, round, updates[i].n_samples,
                         carried[i].second_moment};
                steps_num += static_cast<double>(carried[i].step_count) *
                             static_cast<double>(updates[i].n_samples);
                weight_sum += static_cast<double>(updates[i].n_samples);
            }
            optimizer_state<T> shared = carried[0];
            shared.first_moment = aggregate_weighted(std::move(fm));
            shared.second_moment = aggregate_weighted(std::move(sm));
            shared.step_count =
                static_cast<std::uint64_t>(std::llround(steps_num / weight_sum));
            for (auto& c : carried) c = shared;
        }

        m.params.values = aggregate_weighted(std::move(updates));
        r.log.steps.push_back(ctx.score(m, "round", round, clock));
    }
    detail::finish(r, m, ctx);
    return r;
}

namespace detail {

// Shared skeleton of the two weight-passing strategies: one model object
// travels across institutions; `train_visit` runs the local schedule for one
// stop and the caller decides what gets scored when.
template <class T, class TrainVisit, class AfterVisit, class AfterPass>
run_result<T> run_incremental(strategy_kind kind, const model_spec& ms,
                              const std::vector<institution_shard>& shards,
                              const std::vector<subject>& holdout,
                              const strategy_options& so, std::uint64_t seed, int passes,
                              TrainVisit&& train_visit, AfterVisit&& after_visit,
                              AfterPass&& after_pass) {
    run_context<T> ctx(shards, holdout, so);
    trainable_model<T> m(ms);
    m.init(seed);
    m.opt.kind = so.optimizer;
    m.opt.learning_rate = so.learning_rate;

    run_result<T> r;
    r.log.strategy = strategy_kind_name(kind);
    r.log.seed = seed;
    int visit_index = 0;
    for (int pass = 0; pass < passes; ++pass) {
        const auto order = pass_order(shards, so.order, seed, pass);
        for (std::size_t oi : order) {
            const institution_shard& sh = shards[oi];
            step_clock clock(so.record_wall_time);
            if (so.reset_moments_on_handoff) {
                m.opt = optimizer_state<T>{};
                m.opt.kind = so.optimizer;
                m.opt.learning_rate = so.learning_rate;
            }
            rng_stream rng(visit_seed(seed, pass, sh.institution_id));
            const train_report rep = train_visit(m, sh, rng);
            r.log.visits.push_back({sh.institution_id, rep.epochs_run, rep.stopped_early});
            after_visit(ctx, m, r, sh, visit_index++, clock);
        }
        after_pass(ctx, m, r, pass);
    }
    finish(r, m, ctx);
    return r;
}

} // namespace detail

// Cyclic weight transfer: the model makes `cycles` full passes over the
// institutions, training a fixed number of epochs at each stop without any
// checkpoint selection. The institution-0 training score is logged after
// every stop; the global score after every full cycle.
template <class T>
run_result<T> run_ciil(const model_spec& ms, const std::vector<institution_shard>& shards,
                       const std::vector<subject>& holdout, const strategy_options& so,
                       std::uint64_t seed) {
    if (so.cycles < 1) throw config_error("run_ciil: cycles must be >= 1");
    return detail::run_incremental<T>(
        strategy_kind::ciil, ms, shards, holdout, so, seed, so.cycles,
        [&](trainable_model<T>& m, const institution_shard& sh, rng_stream& rng) {
            train_options to;
            to.epochs = so.epochs_per_cycle_stop;
            to.batch_size = so.batch_size;
            to.track_train_dice = so.track_train_dice;
            return train_local(m, sh, to, rng);
        },
        [&](detail::run_context<T>& ctx, trainable_model<T>& m, run_result<T>& r,
            const institution_shard&, int visit, const detail::step_clock& clock) {
            r.log.steps.push_back(ctx.score(m, "visit", visit, clock, false, true));
        },
        [&](detail::run_context<T>& ctx, trainable_model<T>& m, run_result<T>& r, int pass) {
            detail::step_clock clock(false);
            r.log.steps.push_back(ctx.score(m, "cycle", pass, clock, true, false));
        });
}

// Single-pass incremental transfer: the model visits each institution once,
// trains until the local validation score stops improving for `patience`
// epochs, and hands the best-scoring checkpoint onward. The global score is
// logged after every visit.
template <class T>
run_result<T> run_iil(const model_spec& ms, const std::vector<institution_shard>& shards,
                      const std::vector<subject>& holdout, const strategy_options& so,
                      std::uint64_t seed) {
    return detail::run_incremental<T>(
        strategy_kind::iil, ms, shards, holdout, so, seed, 1,
        [&](trainable_model<T>& m, const institution_shard& sh, rng_stream& rng) {
            train_options to;
            to.batch_size = so.batch_size;
            to.patience = so.patience;
            to.max_epochs = so.max_epochs_per_visit;
            to.restore_best = true;
            to.track_train_dice = so.track_train_dice;
            return train_local(m, sh, to, rng);
        },
        [&](detail::run_context<T>& ctx, trainable_model<T>& m, run_result<T>& r,
            const institution_shard&, int visit, const detail::step_clock& clock) {
            r.log.steps.push_back(ctx.score(m, "visit", visit, clock, true, true));
        },
        [](detail::run_context<T>&, trainable_model<T>&, run_result<T>&, int) {});
}

// Dispatcher over all four regimes. `training` is the un-partitioned
// training split the centralized baseline pools; the collaborative kinds
// train on `shards`.
template <class T>
run_result<T> run_strategy(strategy_kind kind, const model_spec& ms,
                           const std::vector<subject>& training,
                           const std::vector<institution_shard>& shards,
                           const std::vector<subject>& holdout, const strategy_options& so,
                           std::uint64_t seed) {
    switch (kind) {
        case strategy_kind::centralized:
            return run_centralized<T>(ms, training, holdout, so, seed);
        case strategy_kind::federated: return run_federated<T>(ms, shards, holdout, so, seed);
        case strategy_kind::ciil: return run_ciil<T>(ms, shards, holdout, so, seed);
        case strategy_kind::iil: return run_iil<T>(ms, shards, holdout, so, seed);
    }
    throw config_error("run_strategy: unknown strategy kind");
}

} // namespace fedseg
