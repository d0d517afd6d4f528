#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include <fedseg/cohort.hpp>
#include <fedseg/dice.hpp>
#include <fedseg/network.hpp>
#include <fedseg/rng.hpp>
#include <fedseg/tensor.hpp>

namespace testutil {

using namespace fedseg;

inline tensor4<double> random_batch(int n, int c, int h, int w, rng_stream& rng) {
    tensor4<double> t(n, c, h, w);
    for (auto& v : t.data) v = rng.normal();
    return t;
}

inline std::vector<double> random_coeffs(std::size_t n, rng_stream& rng) {
    std::vector<double> c(n);
    for (auto& v : c) v = rng.normal();
    return c;
}

inline double linear_loss(const tensor4<double>& y, const std::vector<double>& c) {
    double s = 0;
    for (std::size_t i = 0; i < y.data.size(); ++i) s += c[i] * y.data[i];
    return s;
}

inline double rel_err(double a, double b, double floor_) {
    const double d = std::fabs(a - b);
    return d / std::max({std::fabs(a), std::fabs(b), floor_});
}

struct fd_report {
    double worst_param = 0;
    double worst_input = 0;
};

// Central finite differences against the analytic backward pass, using a
// fixed random linear functional of the output as the loss.
inline fd_report fd_check_linear(const network<double>& net, const flat_params<double>& p,
                                 const tensor4<double>& x, rng_stream& rng,
                                 double h = 1e-5, double floor_ = 1e-2) {
    auto fwd = net.forward(p, x, false);
    const auto coeffs = random_coeffs(fwd.predictions.data.size(), rng);

    tensor4<double> gy = fwd.predictions;
    for (std::size_t i = 0; i < gy.data.size(); ++i) gy.data[i] = coeffs[i];
    const auto back = net.backward(p, fwd.cache, gy);

    fd_report rep;
    flat_params<double> q = p;
    for (std::size_t j = 0; j < q.values.size(); ++j) {
        const double keep = q.values[j];
        q.values[j] = keep + h;
        const double lp = linear_loss(net.forward(q, x, false).predictions, coeffs);
        q.values[j] = keep - h;
        const double lm = linear_loss(net.forward(q, x, false).predictions, coeffs);
        q.values[j] = keep;
        const double fd = (lp - lm) / (2 * h);
        rep.worst_param = std::max(rep.worst_param, rel_err(back.param_grad[j], fd, floor_));
    }
    tensor4<double> xi = x;
    for (std::size_t j = 0; j < xi.data.size(); ++j) {
        const double keep = xi.data[j];
        xi.data[j] = keep + h;
        const double lp = linear_loss(net.forward(p, xi, false).predictions, coeffs);
        xi.data[j] = keep - h;
        const double lm = linear_loss(net.forward(p, xi, false).predictions, coeffs);
        xi.data[j] = keep;
        const double fd = (lp - lm) / (2 * h);
        rep.worst_input =
            std::max(rep.worst_input, rel_err(back.input_grad.data[j], fd, floor_));
    }
    return rep;
}

// Same idea for a full model with the training loss on a random 0/1 target.
inline double fd_check_dice_loss(const network<double>& net, const flat_params<double>& p,
                                 const tensor4<double>& x,
                                 const std::vector<std::uint8_t>& target,
                                 double h = 1e-6, double floor_ = 1e-2) {
    auto fwd = net.forward(p, x, false);
    const auto g = soft_dice_loss_grad<double>(fwd.predictions.data, target);
    tensor4<double> gy = fwd.predictions;
    gy.data = g;
    const auto back = net.backward(p, fwd.cache, gy);

    double worst = 0;
    flat_params<double> q = p;
    for (std::size_t j = 0; j < q.values.size(); ++j) {
        const double keep = q.values[j];
        q.values[j] = keep + h;
        const double lp =
            soft_dice_loss<double>(net.forward(q, x, false).predictions.data, target);
        q.values[j] = keep - h;
        const double lm =
            soft_dice_loss<double>(net.forward(q, x, false).predictions.data, target);
        q.values[j] = keep;
        const double fd = (lp - lm) / (2 * h);
        worst = std::max(worst, rel_err(back.param_grad[j], fd, floor_));
    }
    return worst;
}

// Tiny synthetic subjects without going through the cohort generator.
inline subject make_subject(int id, int slices, int h, int w, std::uint64_t seed) {
    subject s;
    s.subject_id = id;
    rng_stream rng(seed);
    for (int k = 0; k < slices; ++k) {
        seg_sample sl;
        sl.h = h;
        sl.w = w;
        sl.image.resize(static_cast<std::size_t>(h) * w);
        sl.mask.resize(sl.image.size());
        for (std::size_t i = 0; i < sl.image.size(); ++i) {
            sl.image[i] = static_cast<float>(rng.uniform());
            sl.mask[i] = rng.uniform() < 0.3 ? 1 : 0;
        }
        s.slices.push_back(std::move(sl));
    }
    return s;
}

inline std::vector<subject> make_subjects(int count, int slices, int h, int w,
                                          std::uint64_t seed) {
    std::vector<subject> out;
    for (int i = 0; i < count; ++i)
        out.push_back(make_subject(i, slices, h, w, derive_seed(seed, "subj", i)));
    return out;
}

} // namespace testutil
