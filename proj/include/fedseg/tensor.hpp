#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "fedseg/errors.hpp"

namespace fedseg {

// Dense NCHW tensor. Row-major, contiguous; (h, w) rows are the unit the
// conv kernels stream over.
template <class T>
struct tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;

    tensor4() = default;
    tensor4(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<std::size_t>(n_) * c_ * h_ * w_, T(0)) {}

    std::size_t size() const { return data.size(); }

    std::size_t plane_offset(int b, int ch) const {
        return (static_cast<std::size_t>(b) * c + ch) * h * w;
    }

    T* plane(int b, int ch) { return data.data() + plane_offset(b, ch); }
    const T* plane(int b, int ch) const { return data.data() + plane_offset(b, ch); }

    T& at(int b, int ch, int y, int x) {
        return data[(plane_offset(b, ch) + static_cast<std::size_t>(y) * w) + x];
    }
    const T& at(int b, int ch, int y, int x) const {
        return data[(plane_offset(b, ch) + static_cast<std::size_t>(y) * w) + x];
    }

    bool same_dims(const tensor4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

} // namespace fedseg
