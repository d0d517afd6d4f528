#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fedseg/errors.hpp"

namespace fedseg {

// Dice coefficient for binary masks: 2|P∩T| / (|P|+|T|).
// Both masks empty counts as perfect agreement (1.0).
template <class T>
double dice_binary(std::span<const T> prediction, std::span<const std::uint8_t> target) {
    if (prediction.size() != target.size())
        throw shape_error("dice: prediction/target size mismatch");
    std::int64_t p = 0, t = 0, both = 0;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const T pv = prediction[i];
        if (pv != T(0) && pv != T(1))
            throw precondition_error("dice: prediction is not binary");
        const bool pb = pv == T(1);
        const bool tb = target[i] != 0;
        p += pb;
        t += tb;
        both += pb && tb;
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

namespace detail {

template <class T>
struct mask_sums {
    double p = 0, t = 0, pt = 0;
};

template <class T>
mask_sums<T> soft_sums(std::span<const T> prediction, std::span<const std::uint8_t> target) {
    if (prediction.size() != target.size())
        throw shape_error("dice loss: prediction/target size mismatch");
    mask_sums<T> s;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double pv = static_cast<double>(prediction[i]);
        if (!(pv >= 0.0 && pv <= 1.0))
            throw precondition_error("dice loss: prediction value outside [0,1]");
        const double tv = target[i] != 0 ? 1.0 : 0.0;
        s.p += pv;
        s.t += tv;
        s.pt += pv * tv;
    }
    return s;
}

} // namespace detail

// Laplace-smoothed log-rearranged Dice loss:
//   loss = log(|P|+|T|+1) - log(2|P∩T|+1)
// with |P| = Σp, |T| = Σt, |P∩T| = Σ p·t for soft predictions.
template <class T>
double soft_dice_loss(std::span<const T> prediction, std::span<const std::uint8_t> target) {
    const auto s = detail::soft_sums(prediction, target);
    return std::log(s.p + s.t + 1.0) - std::log(2.0 * s.pt + 1.0);
}

// Closed-form gradient of the loss above w.r.t. each prediction value:
//   d/dp_i = 1/(|P|+|T|+1) - 2 t_i/(2|P∩T|+1)
// `scale` multiplies every component (used for batch-mean losses).
template <class T>
std::vector<T> soft_dice_loss_grad(std::span<const T> prediction,
                                   std::span<const std::uint8_t> target,
                                   double scale = 1.0) {
    const auto s = detail::soft_sums(prediction, target);
    const double a = 1.0 / (s.p + s.t + 1.0);
    const double b = 2.0 / (2.0 * s.pt + 1.0);
    std::vector<T> grad(prediction.size());
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double tv = target[i] != 0 ? 1.0 : 0.0;
        grad[i] = static_cast<T>(scale * (a - b * tv));
    }
    return grad;
}

} // namespace fedseg
