#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedseg/layers.hpp"
#include "fedseg/params.hpp"
#include "fedseg/rng.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

// Cached intermediates from one forward pass; everything backward needs.
template <class T>
struct tape {
    tensor4<T> input;
    std::vector<tensor4<T>> outputs;              // one per layer
    std::vector<std::vector<std::int32_t>> pool_argmax;
    std::vector<std::vector<T>> dropout_scale;    // 0 or 1/(1-rate) per element
    bool training = false;
};

template <class T>
struct forward_result {
    tensor4<T> predictions; // copy of the last layer's output
    tape<T> cache;
};

template <class T>
struct backward_result {
    std::vector<T> param_grad; // aligned with the flat parameter vector
    tensor4<T> input_grad;
};

// A feed-forward layer graph. Layer i consumes layer i-1's output (or the
// network input); concat_skip layers additionally consume the saved output of
// an earlier layer. Parameters live outside the network in a flat_params
// whose manifest this class defines.
template <class T>
class network {
public:
    network() = default;

    network(std::vector<layer_spec> layers, int in_channels)
        : layers_(std::move(layers)), in_channels_(in_channels) {
        validate_topology();
        std::size_t off = 0;
        for (const auto& l : layers_) {
            offsets_.push_back(off);
            if (l.kind == layer_kind::conv3x3) {
                manifest_.push_back({l.id + ".w", {l.out_channels, l.in_channels, 3, 3}});
                manifest_.push_back({l.id + ".b", {l.out_channels}});
                off += static_cast<std::size_t>(l.out_channels) * l.in_channels * 9 +
                       l.out_channels;
            } else if (l.kind == layer_kind::conv1x1) {
                manifest_.push_back({l.id + ".w", {l.out_channels, l.in_channels}});
                manifest_.push_back({l.id + ".b", {l.out_channels}});
                off += static_cast<std::size_t>(l.out_channels) * l.in_channels +
                       l.out_channels;
            }
        }
        param_count_ = off;
    }

    const std::vector<layer_spec>& layers() const { return layers_; }
    const param_manifest& manifest() const { return manifest_; }
    std::size_t param_count() const { return param_count_; }
    int in_channels() const { return in_channels_; }

    flat_params<T> zero_params() const {
        flat_params<T> p;
        p.values.assign(param_count_, T(0));
        p.manifest = manifest_;
        return p;
    }

    // He-normal weights (std = sqrt(2/fan_in)), zero biases. Draws in
    // manifest order so a seed pins the initialization bit-for-bit.
    flat_params<T> init_params(rng_stream& rng) const {
        flat_params<T> p = zero_params();
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (l.kind != layer_kind::conv3x3 && l.kind != layer_kind::conv1x1)
                continue;
            const int taps = l.kind == layer_kind::conv3x3 ? 9 : 1;
            const std::size_t nw =
                static_cast<std::size_t>(l.out_channels) * l.in_channels * taps;
            const double stddev = std::sqrt(2.0 / (l.in_channels * taps));
            T* w = p.values.data() + offsets_[i];
            for (std::size_t k = 0; k < nw; ++k)
                w[k] = static_cast<T>(rng.normal(0.0, stddev));
            // biases stay zero
        }
        return p;
    }

    // rng is required only when training with a dropout rate above zero.
    forward_result<T> forward(const flat_params<T>& params, const tensor4<T>& batch,
                              bool training, rng_stream* rng = nullptr) const {
        check_params(params);
        if (batch.c != in_channels_)
            throw shape_error("forward: batch has " + std::to_string(batch.c) +
                              " channels, network expects " +
                              std::to_string(in_channels_));
        if (!batch.all_finite())
            throw numeric_error("forward: non-finite value in input batch");

        forward_result<T> res;
        res.cache.training = training;
        res.cache.input = batch;
        res.cache.outputs.resize(layers_.size());
        res.cache.pool_argmax.resize(layers_.size());
        res.cache.dropout_scale.resize(layers_.size());

        const tensor4<T>* cur = &res.cache.input;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            apply_layer(i, params, *cur, res.cache, training, rng);
            cur = &res.cache.outputs[i];
        }
        res.predictions = *cur;
        if (!res.predictions.all_finite())
            throw numeric_error("forward: non-finite value in predictions");
        return res;
    }

    backward_result<T> backward(const flat_params<T>& params, const tape<T>& cache,
                                const tensor4<T>& pred_grad) const {
        check_params(params);
        if (cache.outputs.size() != layers_.size())
            throw shape_error("backward: tape does not match this network");
        if (!pred_grad.same_dims(cache.outputs.back()))
            throw shape_error("backward: prediction-grad dims do not match tape");

        backward_result<T> res;
        res.param_grad.assign(param_count_, T(0));

        // grad w.r.t. each layer's output; skip taps accumulate here too
        std::vector<tensor4<T>> gout(layers_.size());
        gout.back() = pred_grad;
        tensor4<T> ginput(cache.input.n, cache.input.c, cache.input.h, cache.input.w);

        for (std::size_t idx = layers_.size(); idx-- > 0;) {
            if (gout[idx].data.empty()) continue; // nothing flowed here
            const auto& l = layers_[idx];
            const tensor4<T>& in = idx == 0 ? cache.input : cache.outputs[idx - 1];
            tensor4<T>& gin = idx == 0 ? ginput : ensure(gout[idx - 1], in);
            const tensor4<T>& g = gout[idx];

            switch (l.kind) {
                case layer_kind::conv3x3:
                    kernels::conv3x3_backward(
                        in, g, gin, params.values.data() + offsets_[idx],
                        res.param_grad.data() + offsets_[idx],
                        res.param_grad.data() + offsets_[idx] +
                            static_cast<std::size_t>(l.out_channels) * l.in_channels * 9,
                        l.in_channels, l.out_channels);
                    break;
                case layer_kind::conv1x1:
                    kernels::conv1x1_backward(
                        in, g, gin, params.values.data() + offsets_[idx],
                        res.param_grad.data() + offsets_[idx],
                        res.param_grad.data() + offsets_[idx] +
                            static_cast<std::size_t>(l.out_channels) * l.in_channels,
                        l.in_channels, l.out_channels);
                    break;
                case layer_kind::relu: {
                    const std::size_t n = in.size();
                    for (std::size_t k = 0; k < n; ++k)
                        if (in.data[k] > T(0)) gin.data[k] += g.data[k];
                    break;
                }
                case layer_kind::sigmoid: {
                    const tensor4<T>& out = cache.outputs[idx];
                    const std::size_t n = in.size();
                    for (std::size_t k = 0; k < n; ++k)
                        gin.data[k] += g.data[k] * out.data[k] * (T(1) - out.data[k]);
                    break;
                }
                case layer_kind::maxpool2:
                    kernels::maxpool2_backward(g, gin, cache.pool_argmax[idx]);
                    break;
                case layer_kind::upsample2:
                    kernels::upsample2_backward(g, gin);
                    break;
                case layer_kind::dropout: {
                    const auto& scale = cache.dropout_scale[idx];
                    const std::size_t n = in.size();
                    if (scale.empty()) { // eval pass or rate 0: identity
                        for (std::size_t k = 0; k < n; ++k) gin.data[k] += g.data[k];
                    } else {
                        for (std::size_t k = 0; k < n; ++k)
                            gin.data[k] += g.data[k] * scale[k];
                    }
                    break;
                }
                case layer_kind::concat_skip: {
                    const tensor4<T>& skip = cache.outputs[l.skip_from];
                    tensor4<T>& gskip = ensure(gout[l.skip_from], skip);
                    const std::size_t hw = static_cast<std::size_t>(in.h) * in.w;
                    for (int b = 0; b < in.n; ++b) {
                        for (int c = 0; c < in.c; ++c) {
                            const T* gp = g.plane(b, c);
                            T* dst = gin.plane(b, c);
                            for (std::size_t k = 0; k < hw; ++k) dst[k] += gp[k];
                        }
                        for (int c = 0; c < skip.c; ++c) {
                            const T* gp = g.plane(b, in.c + c);
                            T* dst = gskip.plane(b, c);
                            for (std::size_t k = 0; k < hw; ++k) dst[k] += gp[k];
                        }
                    }
                    break;
                }
            }
        }
        res.input_grad = std::move(ginput);
        return res;
    }

private:
    static tensor4<T>& ensure(tensor4<T>& t, const tensor4<T>& like) {
        if (t.data.empty()) t = tensor4<T>(like.n, like.c, like.h, like.w);
        return t;
    }

    void check_params(const flat_params<T>& p) const {
        if (p.values.size() != param_count_)
            throw shape_error("params length " + std::to_string(p.values.size()) +
                              " does not match network parameter count " +
                              std::to_string(param_count_));
    }

    void validate_topology() const {
        int prev_c = in_channels_;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (l.in_channels != prev_c)
                throw shape_error("layer " + l.id + ": in_channels " +
                                  std::to_string(l.in_channels) +
                                  " does not match incoming " + std::to_string(prev_c));
            if (l.kind == layer_kind::concat_skip) {
                if (l.skip_from < 0 || l.skip_from >= static_cast<int>(i))
                    throw shape_error("layer " + l.id + ": bad skip source");
                const int skip_c = layers_[l.skip_from].out_channels;
                if (l.out_channels != l.in_channels + skip_c)
                    throw shape_error("layer " + l.id +
                                      ": concat out_channels must equal sum of inputs");
            }
            if (l.dropout_rate != 0.0 && l.kind != layer_kind::dropout)
                throw shape_error("layer " + l.id +
                                  ": dropout_rate on a non-dropout layer");
            prev_c = l.out_channels;
        }
    }

    void apply_layer(std::size_t i, const flat_params<T>& params, const tensor4<T>& in,
                     tape<T>& tp, bool training, rng_stream* rng) const {
        const auto& l = layers_[i];
        if (in.c != l.in_channels)
            throw shape_error("layer " + l.id + ": input has " + std::to_string(in.c) +
                              " channels, expected " + std::to_string(l.in_channels));
        tensor4<T>& out = tp.outputs[i];
        switch (l.kind) {
            case layer_kind::conv3x3:
                out = tensor4<T>(in.n, l.out_channels, in.h, in.w);
                kernels::conv3x3_forward(
                    in, out, params.values.data() + offsets_[i],
                    params.values.data() + offsets_[i] +
                        static_cast<std::size_t>(l.out_channels) * l.in_channels * 9,
                    l.in_channels, l.out_channels);
                break;
            case layer_kind::conv1x1:
                out = tensor4<T>(in.n, l.out_channels, in.h, in.w);
                kernels::conv1x1_forward(
                    in, out, params.values.data() + offsets_[i],
                    params.values.data() + offsets_[i] +
                        static_cast<std::size_t>(l.out_channels) * l.in_channels,
                    l.in_channels, l.out_channels);
                break;
            case layer_kind::relu:
                out = in;
                for (T& v : out.data) v = v > T(0) ? v : T(0);
                break;
            case layer_kind::sigmoid:
                out = in;
                for (T& v : out.data)
                    v = T(1) / (T(1) + static_cast<T>(std::exp(-static_cast<double>(v))));
                break;
            case layer_kind::maxpool2:
                if (in.h % 2 != 0 || in.w % 2 != 0)
                    throw shape_error("layer " + l.id + ": maxpool2 needs even H and W, got " +
                                      std::to_string(in.h) + "x" + std::to_string(in.w));
                out = tensor4<T>(in.n, l.out_channels, in.h / 2, in.w / 2);
                kernels::maxpool2_forward(in, out, tp.pool_argmax[i]);
                break;
            case layer_kind::upsample2:
                out = tensor4<T>(in.n, l.out_channels, in.h * 2, in.w * 2);
                kernels::upsample2_forward(in, out);
                break;
            case layer_kind::dropout: {
                out = in;
                if (training && l.dropout_rate > 0.0) {
                    if (rng == nullptr)
                        throw precondition_error(
                            "forward: training pass with dropout needs an rng stream");
                    auto& scale = tp.dropout_scale[i];
                    scale.assign(in.size(), T(0));
                    const T keep_scale = static_cast<T>(1.0 / (1.0 - l.dropout_rate));
                    for (std::size_t k = 0; k < in.size(); ++k) {
                        if (rng->uniform() >= l.dropout_rate) {
                            scale[k] = keep_scale;
                            out.data[k] = in.data[k] * keep_scale;
                        } else {
                            out.data[k] = T(0);
                        }
                    }
                }
                break;
            }
            case layer_kind::concat_skip: {
                const tensor4<T>& skip = tp.outputs[l.skip_from];
                if (skip.h != in.h || skip.w != in.w)
                    throw shape_error("layer " + l.id + ": concat inputs differ in H/W");
                out = tensor4<T>(in.n, in.c + skip.c, in.h, in.w);
                const std::size_t hw = static_cast<std::size_t>(in.h) * in.w;
                for (int b = 0; b < in.n; ++b) {
                    for (int c = 0; c < in.c; ++c)
                        std::copy_n(in.plane(b, c), hw, out.plane(b, c));
                    for (int c = 0; c < skip.c; ++c)
                        std::copy_n(skip.plane(b, c), hw, out.plane(b, in.c + c));
                }
                break;
            }
        }
    }

    std::vector<layer_spec> layers_;
    int in_channels_ = 1;
    std::vector<std::size_t> offsets_; // flat-parameter offset per layer
    param_manifest manifest_;
    std::size_t param_count_ = 0;
};

} // namespace fedseg
