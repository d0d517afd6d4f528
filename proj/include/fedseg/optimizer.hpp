#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fedseg/errors.hpp"
#include "fedseg/params.hpp"

namespace fedseg {

enum class opt_kind { sgd, adam };

template <class T>
struct optimizer_state {
    opt_kind kind = opt_kind::adam;
    double learning_rate = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step_count = 0;
    std::vector<T> first_moment;
    std::vector<T> second_moment;

    void reset_moments() {
        std::fill(first_moment.begin(), first_moment.end(), T(0));
        std::fill(second_moment.begin(), second_moment.end(), T(0));
        step_count = 0;
    }
};

namespace detail {

// Locates which manifest entry owns a flat index, for error messages.
inline std::string layer_of_index(const param_manifest& m, std::size_t idx) {
    std::size_t off = 0;
    for (const auto& s : m) {
        off += s.count();
        if (idx < off) return s.layer_id;
    }
    return "<unknown>";
}

} // namespace detail

// One optimizer step in place. SGD: p -= lr * g. Adam: bias-corrected moment
// update with step_count incremented by exactly 1. Arithmetic runs in double
// and is rounded back to T so float and double models share one code path.
template <class T>
void optimizer_step(optimizer_state<T>& state, flat_params<T>& params,
                    const std::vector<T>& grad) {
    if (grad.size() != params.values.size())
        throw shape_error("optimizer_step: grad length " + std::to_string(grad.size()) +
                          " does not match parameter count " +
                          std::to_string(params.values.size()));
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (std::isnan(static_cast<double>(grad[i])))
            throw numeric_error("optimizer_step: NaN gradient in layer " +
                                detail::layer_of_index(params.manifest, i));
    }

    const std::size_t n = params.values.size();
    if (state.kind == opt_kind::sgd) {
        for (std::size_t i = 0; i < n; ++i)
            params.values[i] = static_cast<T>(static_cast<double>(params.values[i]) -
                                              state.learning_rate *
                                                  static_cast<double>(grad[i]));
        ++state.step_count;
        return;
    }

    if (state.first_moment.size() != n) state.first_moment.assign(n, T(0));
    if (state.second_moment.size() != n) state.second_moment.assign(n, T(0));

    ++state.step_count;
    const double b1 = state.beta1, b2 = state.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(grad[i]);
        const double m = b1 * static_cast<double>(state.first_moment[i]) + (1.0 - b1) * g;
        const double v = b2 * static_cast<double>(state.second_moment[i]) + (1.0 - b2) * g * g;
        state.first_moment[i] = static_cast<T>(m);
        state.second_moment[i] = static_cast<T>(v);
        const double mhat = m / corr1;
        const double vhat = v / corr2;
        params.values[i] = static_cast<T>(static_cast<double>(params.values[i]) -
                                          state.learning_rate * mhat /
                                              (std::sqrt(vhat) + state.epsilon));
    }
}

} // namespace fedseg
