#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fedseg/cohort.hpp"
#include "fedseg/dice.hpp"
#include "fedseg/network.hpp"
#include "fedseg/optimizer.hpp"
#include "fedseg/rng.hpp"

namespace fedseg {

// Buildable model description, as it appears in run configs.
struct model_spec {
    std::string kind = "mini_unet"; // mini_unet | logistic
    int in_channels = 1;
    int base_channels = 8;
    int depth = 2;
    double dropout = 0.2;
};

// Single conv3x3 + sigmoid pixel classifier. Linear in the logits, so it has
// a closed-form training trajectory that higher-level equivalence checks rely
// on, and it draws no dropout randomness.
inline std::vector<layer_spec> logistic_layers(int in_channels) {
    std::vector<layer_spec> layers;
    layers.push_back({layer_kind::conv3x3, in_channels, 1, 0.0, -1, "pix.conv"});
    layers.push_back({layer_kind::sigmoid, 1, 1, 0.0, -1, "pix.act"});
    return layers;
}

// Contracting/expanding segmentation network: `depth` encoder blocks of two
// 3x3 convs with relu, dropout and 2x maxpool; a two-conv bottleneck; then
// mirrored decoder blocks of nearest-neighbour upsampling, skip
// concatenation and two 3x3 convs; 1x1 conv + sigmoid head. Channel width
// doubles per level starting from base_channels.
inline std::vector<layer_spec> mini_unet_layers(int in_channels, int base_channels,
                                                int depth, double dropout) {
    if (in_channels < 1 || base_channels < 1 || depth < 0)
        throw config_error("mini_unet: bad channel count or depth");
    if (dropout < 0 || dropout >= 1)
        throw config_error("mini_unet: dropout rate must be in [0, 1)");

    std::vector<layer_spec> layers;
    std::vector<int> skip_src(depth, -1);
    int prev = in_channels;
    auto block = [&](const std::string& name, int out) {
        layers.push_back({layer_kind::conv3x3, prev, out, 0.0, -1, name + ".conv1"});
        layers.push_back({layer_kind::relu, out, out, 0.0, -1, name + ".act1"});
        layers.push_back({layer_kind::conv3x3, out, out, 0.0, -1, name + ".conv2"});
        layers.push_back({layer_kind::relu, out, out, 0.0, -1, name + ".act2"});
        if (dropout > 0)
            layers.push_back({layer_kind::dropout, out, out, dropout, -1, name + ".drop"});
        prev = out;
    };

    for (int d = 0; d < depth; ++d) {
        block("enc" + std::to_string(d), base_channels << d);
        skip_src[d] = static_cast<int>(layers.size()) - 1;
        layers.push_back({layer_kind::maxpool2, prev, prev, 0.0, -1,
                          "enc" + std::to_string(d) + ".pool"});
    }
    block("bott", base_channels << depth);
    for (int d = depth - 1; d >= 0; --d) {
        const std::string name = "dec" + std::to_string(d);
        layers.push_back({layer_kind::upsample2, prev, prev, 0.0, -1, name + ".up"});
        const int skip_ch = base_channels << d;
        layers.push_back({layer_kind::concat_skip, prev, prev + skip_ch, 0.0,
                          skip_src[d], name + ".cat"});
        prev += skip_ch;
        layers.push_back({layer_kind::conv3x3, prev, skip_ch, 0.0, -1, name + ".conv1"});
        layers.push_back({layer_kind::relu, skip_ch, skip_ch, 0.0, -1, name + ".act1"});
        layers.push_back({layer_kind::conv3x3, skip_ch, skip_ch, 0.0, -1, name + ".conv2"});
        layers.push_back({layer_kind::relu, skip_ch, skip_ch, 0.0, -1, name + ".act2"});
        prev = skip_ch;
    }
    layers.push_back({layer_kind::conv1x1, prev, 1, 0.0, -1, "head.conv"});
    layers.push_back({layer_kind::sigmoid, 1, 1, 0.0, -1, "head.act"});
    return layers;
}

inline std::vector<layer_spec> build_layers(const model_spec& spec) {
    if (spec.kind == "logistic") return logistic_layers(spec.in_channels);
    if (spec.kind == "mini_unet")
        return mini_unet_layers(spec.in_channels, spec.base_channels, spec.depth,
                                spec.dropout);
    throw config_error("unknown model kind '" + spec.kind + "'");
}

template <class T>
struct trainable_model {
    network<T> net;
    flat_params<T> params;
    optimizer_state<T> opt;

    explicit trainable_model(const model_spec& spec)
        : net(build_layers(spec), spec.in_channels) {
        params = net.zero_params();
    }

    void init(std::uint64_t seed) {
        rng_stream rng(derive_seed(seed, "init"));
        params = net.init_params(rng);
        opt.reset_moments();
    }
};

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

template <class T>
std::pair<tensor4<T>, std::vector<std::uint8_t>>
make_batch(const std::vector<const seg_sample*>& slices,
           const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
    if (begin >= end || end > order.size())
        throw precondition_error("make_batch: empty or out-of-range batch window");
    const seg_sample& first = *slices[order[begin]];
    const int h = first.h, w = first.w;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    tensor4<T> batch(static_cast<int>(end - begin), 1, h, w);
    std::vector<std::uint8_t> target;
    target.reserve((end - begin) * hw);
    for (std::size_t i = begin; i < end; ++i) {
        const seg_sample& s = *slices[order[i]];
        if (s.h != h || s.w != w)
            throw shape_error("make_batch: mixed slice shapes in one batch");
        T* dst = batch.plane(static_cast<int>(i - begin), 0);
        for (std::size_t p = 0; p < hw; ++p) dst[p] = static_cast<T>(s.image[p]);
        target.insert(target.end(), s.mask.begin(), s.mask.end());
    }
    return {std::move(batch), std::move(target)};
}

// ---------------------------------------------------------------------------
// Evaluation: mean binary overlap score across slices. Per-slice scores are
// sorted before summation so the result is exactly invariant to slice order.
// ---------------------------------------------------------------------------

template <class T>
double evaluate(const network<T>& net, const flat_params<T>& params,
                const std::vector<const seg_sample*>& slices, int eval_batch = 64) {
    if (slices.empty()) throw precondition_error("evaluate: no slices");
    std::vector<std::size_t> order(slices.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> scores;
    scores.reserve(slices.size());
    std::vector<T> bin;
    for (std::size_t at = 0; at < order.size();) {
        const std::size_t stop = std::min(order.size(), at + static_cast<std::size_t>(eval_batch));
        auto [batch, target] = make_batch<T>(slices, order, at, stop);
        const auto fwd = net.forward(params, batch, false);
        const std::size_t hw = static_cast<std::size_t>(batch.h) * batch.w;
        for (std::size_t i = 0; i < stop - at; ++i) {
            const T* p = fwd.predictions.plane(static_cast<int>(i), 0);
            bin.assign(hw, T(0));
            for (std::size_t j = 0; j < hw; ++j) bin[j] = p[j] >= T(0.5) ? T(1) : T(0);
            scores.push_back(dice_binary<T>({bin.data(), hw}, {target.data() + i * hw, hw}));
        }
        at = stop;
    }
    std::sort(scores.begin(), scores.end());
    double sum = 0;
    for (double s : scores) sum += s;
    return sum / static_cast<double>(scores.size());
}

template <class T>
double evaluate_subjects(const network<T>& net, const flat_params<T>& params,
                         const std::vector<subject>& subjects, int eval_batch = 64) {
    return evaluate(net, params, institution_shard::flatten(subjects), eval_batch);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// One pass over the slices in a fresh shuffled order; returns the mean
// per-slice training loss. The same stream drives shuffling and dropout, so a
// fixed seed reproduces the epoch bit for bit.
template <class T>
double train_epoch(trainable_model<T>& m, const std::vector<const seg_sample*>& slices,
                   int batch_size, rng_stream& rng) {
    if (slices.empty()) throw precondition_error("train_epoch: no training slices");
    if (batch_size < 1) throw config_error("train_epoch: batch size must be >= 1");
    std::vector<std::size_t> order(slices.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    for (std::size_t at = 0; at < order.size();) {
        const std::size_t stop = std::min(order.size(), at + static_cast<std::size_t>(batch_size));
        auto [batch, target] = make_batch<T>(slices, order, at, stop);
        const auto fwd = m.net.forward(m.params, batch, true, &rng);
        const std::size_t n = stop - at;
        const std::size_t hw = static_cast<std::size_t>(batch.h) * batch.w;
        tensor4<T> pred_grad(batch.n, 1, batch.h, batch.w);
        for (std::size_t i = 0; i < n; ++i) {
            const T* p = fwd.predictions.plane(static_cast<int>(i), 0);
            loss_sum += soft_dice_loss<T>({p, hw}, {target.data() + i * hw, hw});
            const auto g = soft_dice_loss_grad<T>({p, hw}, {target.data() + i * hw, hw},
                                                  1.0 / static_cast<double>(n));
            std::copy(g.begin(), g.end(), pred_grad.plane(static_cast<int>(i), 0));
        }
        const auto bwd = m.net.backward(m.params, fwd.cache, pred_grad);
        optimizer_step(m.opt, m.params, bwd.param_grad);
        at = stop;
    }
    return loss_sum / static_cast<double>(slices.size());
}

struct train_options {
    int epochs = 1;      // fixed epoch count when patience < 0
    int batch_size = 64;
    int patience = -1;   // >= 0 enables validation-score early stopping
    int max_epochs = 200; // safety cap in patience mode
    bool restore_best = false; // hand back the best-validation checkpoint
    bool track_train_dice = true;
};

struct train_report {
    int epochs_run = 0;
    std::uint64_t samples_seen = 0;
    bool stopped_early = false;
    double final_train_loss = std::numeric_limits<double>::quiet_NaN();
    double initial_val_dice = std::numeric_limits<double>::quiet_NaN();
    double best_val_dice = std::numeric_limits<double>::quiet_NaN();
    double final_val_dice = std::numeric_limits<double>::quiet_NaN();
    // Both series hold one entry per trained epoch (NaN where not measured).
    std::vector<double> per_epoch_train_dice;
    std::vector<double> per_epoch_local_val_dice;
};

// Local training on one institution's shard. Fixed-epoch mode runs exactly
// `epochs` passes. Patience mode scores the incoming model on local
// validation first, then trains until the validation score has not strictly
// improved for `patience` consecutive epochs (or max_epochs); with
// restore_best set, the parameters handed back are the best-scoring
// checkpoint, the incoming model included, earliest epoch winning exact ties.
template <class T>
train_report train_local(trainable_model<T>& m, const institution_shard& shard,
                         const train_options& opt, rng_stream& rng) {
    const auto train = shard.train_slices();
    if (train.empty())
        throw precondition_error("train_local: institution " +
                                 std::to_string(shard.institution_id) +
                                 " has no training slices");
    const auto val = shard.val_slices();
    train_report rep;
    const double nan = std::numeric_limits<double>::quiet_NaN();

    auto after_epoch = [&](double loss) {
        rep.final_train_loss = loss;
        ++rep.epochs_run;
        rep.samples_seen += train.size();
        rep.per_epoch_train_dice.push_back(
            opt.track_train_dice ? evaluate(m.net, m.params, train) : nan);
        if (!val.empty()) {
            rep.final_val_dice = evaluate(m.net, m.params, val);
            rep.per_epoch_local_val_dice.push_back(rep.final_val_dice);
        } else {
            rep.per_epoch_local_val_dice.push_back(nan);
        }
    };

    if (opt.patience < 0) {
        for (int e = 0; e < opt.epochs; ++e)
            after_epoch(train_epoch(m, train, opt.batch_size, rng));
        if (!val.empty() && rep.epochs_run > 0)
            rep.best_val_dice =
                *std::max_element(rep.per_epoch_local_val_dice.begin(),
                                  rep.per_epoch_local_val_dice.end());
        return rep;
    }

    if (val.empty())
        throw config_error("train_local: institution " +
                           std::to_string(shard.institution_id) +
                           " has no local validation subject for patience stopping");
    rep.initial_val_dice = evaluate(m.net, m.params, val);
    rep.best_val_dice = rep.initial_val_dice;
    std::vector<T> best_params = m.params.values;
    int streak = 0;
    while (rep.epochs_run < opt.max_epochs) {
        after_epoch(train_epoch(m, train, opt.batch_size, rng));
        if (rep.final_val_dice > rep.best_val_dice) {
            rep.best_val_dice = rep.final_val_dice;
            if (opt.restore_best) best_params = m.params.values;
            streak = 0;
        } else {
            ++streak;
        }
        if (streak >= opt.patience) {
            rep.stopped_early = true;
            break;
        }
    }
    if (opt.restore_best) m.params.values = std::move(best_params);
    return rep;
}

} // namespace fedseg
