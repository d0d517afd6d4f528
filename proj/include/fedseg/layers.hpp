#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedseg/errors.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

// The eight layer kinds the engine supports.
enum class layer_kind {
    conv3x3,
    conv1x1,
    relu,
    sigmoid,
    maxpool2,
    upsample2,
    concat_skip,
    dropout
};

inline const char* layer_kind_name(layer_kind k) {
    switch (k) {
        case layer_kind::conv3x3: return "conv3x3";
        case layer_kind::conv1x1: return "conv1x1";
        case layer_kind::relu: return "relu";
        case layer_kind::sigmoid: return "sigmoid";
        case layer_kind::maxpool2: return "maxpool2";
        case layer_kind::upsample2: return "upsample2";
        case layer_kind::concat_skip: return "concat-skip";
        case layer_kind::dropout: return "dropout";
    }
    return "?";
}

struct layer_spec {
    layer_kind kind;
    int in_channels = 0;
    int out_channels = 0;
    double dropout_rate = 0.0; // dropout layers only
    int skip_from = -1;        // concat_skip: index of the layer whose output is appended
    std::string id;            // stable name; keys the parameter manifest
};

namespace kernels {

namespace detail {

// Tap-major fallback for planes too small to peel borders: each of the nine
// taps is an axpy over shifted rows. Handles any h, w >= 1.
template <class T>
void conv3x3_forward_small(const tensor4<T>& in, tensor4<T>& out, const T* weights,
                           const T* bias, int ic, int oc) {
    const int h = in.h, w = in.w;
    for (int b = 0; b < in.n; ++b) {
        for (int o = 0; o < oc; ++o) {
            T* outp = out.plane(b, o);
            std::fill(outp, outp + static_cast<std::size_t>(h) * w, bias[o]);
            for (int i = 0; i < ic; ++i) {
                const T* inp = in.plane(b, i);
                const T* wk = weights + (static_cast<std::size_t>(o) * ic + i) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const int dy = ky - 1;
                    const int y0 = std::max(0, -dy), y1 = h - std::max(0, dy);
                    for (int kx = 0; kx < 3; ++kx) {
                        const int dx = kx - 1;
                        const int x0 = std::max(0, -dx);
                        const int len = w - std::max(0, dx) - x0;
                        const T wv = wk[ky * 3 + kx];
                        for (int y = y0; y < y1; ++y) {
                            const T* src = inp + static_cast<std::size_t>(y + dy) * w + (x0 + dx);
                            T* dst = outp + static_cast<std::size_t>(y) * w + x0;
                            for (int x = 0; x < len; ++x) dst[x] += wv * src[x];
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void conv3x3_backward_small(const tensor4<T>& in, const tensor4<T>& gout,
                            tensor4<T>& gin, const T* weights, T* gweights, T* gbias,
                            int ic, int oc) {
    const int h = in.h, w = in.w;
    for (int b = 0; b < in.n; ++b) {
        for (int o = 0; o < oc; ++o) {
            const T* gp = gout.plane(b, o);
            T bsum = T(0);
            for (std::size_t k = 0; k < static_cast<std::size_t>(h) * w; ++k)
                bsum += gp[k];
            gbias[o] += bsum;
            for (int i = 0; i < ic; ++i) {
                const T* inp = in.plane(b, i);
                T* ginp = gin.plane(b, i);
                const T* wk = weights + (static_cast<std::size_t>(o) * ic + i) * 9;
                T* gwk = gweights + (static_cast<std::size_t>(o) * ic + i) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const int dy = ky - 1;
                    const int y0 = std::max(0, -dy), y1 = h - std::max(0, dy);
                    for (int kx = 0; kx < 3; ++kx) {
                        const int dx = kx - 1;
                        const int x0 = std::max(0, -dx);
                        const int len = w - std::max(0, dx) - x0;
                        // weight grad: correlation of gout with the shifted input
                        T acc = T(0);
                        for (int y = y0; y < y1; ++y) {
                            const T* src = inp + static_cast<std::size_t>(y + dy) * w + (x0 + dx);
                            const T* g = gp + static_cast<std::size_t>(y) * w + x0;
                            for (int x = 0; x < len; ++x) acc += g[x] * src[x];
                        }
                        gwk[ky * 3 + kx] += acc;
                        // input grad: gout smeared back through the same tap
                        const T wv = wk[ky * 3 + kx];
                        for (int y = y0; y < y1; ++y) {
                            T* dst = ginp + static_cast<std::size_t>(y + dy) * w + (x0 + dx);
                            const T* g = gp + static_cast<std::size_t>(y) * w + x0;
                            for (int x = 0; x < len; ++x) dst[x] += wv * g[x];
                        }
                    }
                }
            }
        }
    }
}

} // namespace detail

// conv3x3, stride 1, zero same-padding. Weights laid out [oc][ic][3][3],
// then bias [oc]. One pass per output row: three input rows stream through
// nine register weights, with border columns peeled so the interior loop is
// branch-free and vectorizes.
template <class T>
void conv3x3_forward(const tensor4<T>& in, tensor4<T>& out, const T* weights,
                     const T* bias, int ic, int oc) {
    const int h = in.h, w = in.w;
    if (h < 3 || w < 3) {
        detail::conv3x3_forward_small(in, out, weights, bias, ic, oc);
        return;
    }
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int b = 0; b < in.n; ++b) {
        for (int o = 0; o < oc; ++o) {
            T* outp = out.plane(b, o);
            std::fill(outp, outp + hw, bias[o]);
            for (int i = 0; i < ic; ++i) {
                const T* inp = in.plane(b, i);
                const T* wk = weights + (static_cast<std::size_t>(o) * ic + i) * 9;
                const T w00 = wk[0], w01 = wk[1], w02 = wk[2];
                const T w10 = wk[3], w11 = wk[4], w12 = wk[5];
                const T w20 = wk[6], w21 = wk[7], w22 = wk[8];
                for (int y = 0; y < h; ++y) {
                    const T* r1 = inp + static_cast<std::size_t>(y) * w;
                    T* dst = outp + static_cast<std::size_t>(y) * w;
                    if (y > 0 && y < h - 1) {
                        const T* r0 = r1 - w;
                        const T* r2 = r1 + w;
                        for (int x = 1; x < w - 1; ++x)
                            dst[x] += w00 * r0[x - 1] + w01 * r0[x] + w02 * r0[x + 1] +
                                      w10 * r1[x - 1] + w11 * r1[x] + w12 * r1[x + 1] +
                                      w20 * r2[x - 1] + w21 * r2[x] + w22 * r2[x + 1];
                        dst[0] += w01 * r0[0] + w02 * r0[1] + w11 * r1[0] + w12 * r1[1] +
                                  w21 * r2[0] + w22 * r2[1];
                        dst[w - 1] += w00 * r0[w - 2] + w01 * r0[w - 1] + w10 * r1[w - 2] +
                                      w11 * r1[w - 1] + w20 * r2[w - 2] + w21 * r2[w - 1];
                    } else {
                        // top row pairs (r1, r1+w) with the middle/bottom kernel
                        // rows; bottom row pairs (r1-w, r1) with the top/middle.
                        const bool top = y == 0;
                        const T* ra = top ? r1 : r1 - w;
                        const T* rb = top ? r1 + w : r1;
                        const T wa0 = top ? w10 : w00, wa1 = top ? w11 : w01,
                                wa2 = top ? w12 : w02;
                        const T wb0 = top ? w20 : w10, wb1 = top ? w21 : w11,
                                wb2 = top ? w22 : w12;
                        for (int x = 1; x < w - 1; ++x)
                            dst[x] += wa0 * ra[x - 1] + wa1 * ra[x] + wa2 * ra[x + 1] +
                                      wb0 * rb[x - 1] + wb1 * rb[x] + wb2 * rb[x + 1];
                        dst[0] += wa1 * ra[0] + wa2 * ra[1] + wb1 * rb[0] + wb2 * rb[1];
                        dst[w - 1] += wa0 * ra[w - 2] + wa1 * ra[w - 1] + wb0 * rb[w - 2] +
                                      wb1 * rb[w - 1];
                    }
                }
            }
        }
    }
}

template <class T>
void conv3x3_backward(const tensor4<T>& in, const tensor4<T>& gout,
                      tensor4<T>& gin, const T* weights, T* gweights, T* gbias,
                      int ic, int oc) {
    const int h = in.h, w = in.w;
    if (h < 3 || w < 3) {
        detail::conv3x3_backward_small(in, gout, gin, weights, gweights, gbias, ic, oc);
        return;
    }
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int b = 0; b < in.n; ++b) {
        for (int o = 0; o < oc; ++o) {
            const T* gp = gout.plane(b, o);
            T bsum = T(0);
            for (std::size_t k = 0; k < hw; ++k) bsum += gp[k];
            gbias[o] += bsum;
            for (int i = 0; i < ic; ++i) {
                const T* inp = in.plane(b, i);
                T* ginp = gin.plane(b, i);
                const T* wk = weights + (static_cast<std::size_t>(o) * ic + i) * 9;
                T* gwk = gweights + (static_cast<std::size_t>(o) * ic + i) * 9;

                // weight grad: nine fused correlation accumulators, one plane pass
                T a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0;
                T a20 = 0, a21 = 0, a22 = 0;
                for (int y = 0; y < h; ++y) {
                    const T* r1 = inp + static_cast<std::size_t>(y) * w;
                    const T* g = gp + static_cast<std::size_t>(y) * w;
                    if (y > 0) {
                        const T* r0 = r1 - w;
                        T s0 = 0, s1 = 0, s2 = 0;
                        for (int x = 1; x < w - 1; ++x) {
                            s0 += g[x] * r0[x - 1];
                            s1 += g[x] * r0[x];
                            s2 += g[x] * r0[x + 1];
                        }
                        a00 += s0 + g[w - 1] * r0[w - 2];
                        a01 += s1 + g[0] * r0[0] + g[w - 1] * r0[w - 1];
                        a02 += s2 + g[0] * r0[1];
                    }
                    {
                        T s0 = 0, s1 = 0, s2 = 0;
                        for (int x = 1; x < w - 1; ++x) {
                            s0 += g[x] * r1[x - 1];
                            s1 += g[x] * r1[x];
                            s2 += g[x] * r1[x + 1];
                        }
                        a10 += s0 + g[w - 1] * r1[w - 2];
                        a11 += s1 + g[0] * r1[0] + g[w - 1] * r1[w - 1];
                        a12 += s2 + g[0] * r1[1];
                    }
                    if (y < h - 1) {
                        const T* r2 = r1 + w;
                        T s0 = 0, s1 = 0, s2 = 0;
                        for (int x = 1; x < w - 1; ++x) {
                            s0 += g[x] * r2[x - 1];
                            s1 += g[x] * r2[x];
                            s2 += g[x] * r2[x + 1];
                        }
                        a20 += s0 + g[w - 1] * r2[w - 2];
                        a21 += s1 + g[0] * r2[0] + g[w - 1] * r2[w - 1];
                        a22 += s2 + g[0] * r2[1];
                    }
                }
                gwk[0] += a00;
                gwk[1] += a01;
                gwk[2] += a02;
                gwk[3] += a10;
                gwk[4] += a11;
                gwk[5] += a12;
                gwk[6] += a20;
                gwk[7] += a21;
                gwk[8] += a22;

                // input grad: correlation with the 180-degree-rotated kernel,
                // same row walk as the forward pass
                const T w00 = wk[0], w01 = wk[1], w02 = wk[2];
                const T w10 = wk[3], w11 = wk[4], w12 = wk[5];
                const T w20 = wk[6], w21 = wk[7], w22 = wk[8];
                for (int y = 0; y < h; ++y) {
                    const T* g1 = gp + static_cast<std::size_t>(y) * w;
                    T* dst = ginp + static_cast<std::size_t>(y) * w;
                    if (y > 0 && y < h - 1) {
                        const T* g0 = g1 - w;
                        const T* g2 = g1 + w;
                        for (int x = 1; x < w - 1; ++x)
                            dst[x] += w22 * g0[x - 1] + w21 * g0[x] + w20 * g0[x + 1] +
                                      w12 * g1[x - 1] + w11 * g1[x] + w10 * g1[x + 1] +
                                      w02 * g2[x - 1] + w01 * g2[x] + w00 * g2[x + 1];
                        dst[0] += w21 * g0[0] + w20 * g0[1] + w11 * g1[0] + w10 * g1[1] +
                                  w01 * g2[0] + w00 * g2[1];
                        dst[w - 1] += w22 * g0[w - 2] + w21 * g0[w - 1] + w12 * g1[w - 2] +
                                      w11 * g1[w - 1] + w02 * g2[w - 2] + w01 * g2[w - 1];
                    } else {
                        const bool top = y == 0;
                        const T* ga = top ? g1 : g1 - w;
                        const T* gb = top ? g1 + w : g1;
                        const T va0 = top ? w12 : w22, va1 = top ? w11 : w21,
                                va2 = top ? w10 : w20;
                        const T vb0 = top ? w02 : w12, vb1 = top ? w01 : w11,
                                vb2 = top ? w00 : w10;
                        for (int x = 1; x < w - 1; ++x)
                            dst[x] += va0 * ga[x - 1] + va1 * ga[x] + va2 * ga[x + 1] +
                                      vb0 * gb[x - 1] + vb1 * gb[x] + vb2 * gb[x + 1];
                        dst[0] += va1 * ga[0] + va2 * ga[1] + vb1 * gb[0] + vb2 * gb[1];
                        dst[w - 1] += va0 * ga[w - 2] + va1 * ga[w - 1] + vb0 * gb[w - 2] +
                                      vb1 * gb[w - 1];
                    }
                }
            }
        }
    }
}

// conv1x1: weights [oc][ic], bias [oc].
template <class T>
void conv1x1_forward(const tensor4<T>& in, tensor4<T>& out, const T* weights,
                     const T* bias, int ic, int oc) {
    const std::size_t hw = static_cast<std::size_t>(in.h) * in.w;
    for (int b = 0; b < in.n; ++b) {
        for (int o = 0; o < oc; ++o) {
            T* outp = out.plane(b, o);
            std::fill(outp, outp + hw, bias[o]);
            for (int i = 0; i < ic; ++i) {
                const T* inp = in.plane(b, i);
                const T wv = weights[static_cast<std::size_t>(o) * ic + i];
                for (std::size_t k = 0; k < hw; ++k) outp[k] += wv * inp[k];
            }
        }
    }
}

template <class T>
void conv1x1_backward(const tensor4<T>& in, const tensor4<T>& gout,
                      tensor4<T>& gin, const T* weights, T* gweights, T* gbias,
                      int ic, int oc) {
    const std::size_t hw = static_cast<std::size_t>(in.h) * in.w;
    for (int b = 0; b < in.n; ++b) {
        for (int o = 0; o < oc; ++o) {
            const T* gp = gout.plane(b, o);
            T bsum = T(0);
            for (std::size_t k = 0; k < hw; ++k) bsum += gp[k];
            gbias[o] += bsum;
            for (int i = 0; i < ic; ++i) {
                const T* inp = in.plane(b, i);
                T* ginp = gin.plane(b, i);
                const T wv = weights[static_cast<std::size_t>(o) * ic + i];
                T acc = T(0);
                for (std::size_t k = 0; k < hw; ++k) {
                    acc += gp[k] * inp[k];
                    ginp[k] += wv * gp[k];
                }
                gweights[static_cast<std::size_t>(o) * ic + i] += acc;
            }
        }
    }
}

// maxpool 2x2, stride 2. Ties resolve to the first cell in scan order.
// argmax stores the winning offset within the input plane for the backward
// scatter.
template <class T>
void maxpool2_forward(const tensor4<T>& in, tensor4<T>& out,
                      std::vector<std::int32_t>& argmax) {
    const int h = in.h, w = in.w, oh = h / 2, ow = w / 2;
    argmax.resize(out.size());
    std::size_t oidx = 0;
    for (int b = 0; b < in.n; ++b) {
        for (int c = 0; c < in.c; ++c) {
            const T* inp = in.plane(b, c);
            T* outp = out.plane(b, c);
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    const int base = 2 * y * w + 2 * x;
                    int best = base;
                    T bv = inp[base];
                    const int cands[3] = {base + 1, base + w, base + w + 1};
                    for (int cand : cands) {
                        if (inp[cand] > bv) {
                            bv = inp[cand];
                            best = cand;
                        }
                    }
                    outp[static_cast<std::size_t>(y) * ow + x] = bv;
                    argmax[oidx++] = best;
                }
            }
        }
    }
}

template <class T>
void maxpool2_backward(const tensor4<T>& gout, tensor4<T>& gin,
                       const std::vector<std::int32_t>& argmax) {
    std::size_t oidx = 0;
    const std::size_t ohw = static_cast<std::size_t>(gout.h) * gout.w;
    for (int b = 0; b < gout.n; ++b) {
        for (int c = 0; c < gout.c; ++c) {
            const T* gp = gout.plane(b, c);
            T* ginp = gin.plane(b, c);
            for (std::size_t k = 0; k < ohw; ++k)
                ginp[argmax[oidx++]] += gp[k];
        }
    }
}

// nearest-neighbor 2x upsampling.
template <class T>
void upsample2_forward(const tensor4<T>& in, tensor4<T>& out) {
    const int h = in.h, w = in.w;
    for (int b = 0; b < in.n; ++b) {
        for (int c = 0; c < in.c; ++c) {
            const T* inp = in.plane(b, c);
            T* outp = out.plane(b, c);
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const T v = inp[static_cast<std::size_t>(y) * w + x];
                    T* row0 = outp + static_cast<std::size_t>(2 * y) * 2 * w + 2 * x;
                    row0[0] = v;
                    row0[1] = v;
                    row0[2 * w] = v;
                    row0[2 * w + 1] = v;
                }
            }
        }
    }
}

template <class T>
void upsample2_backward(const tensor4<T>& gout, tensor4<T>& gin) {
    const int h = gin.h, w = gin.w;
    for (int b = 0; b < gin.n; ++b) {
        for (int c = 0; c < gin.c; ++c) {
            const T* gp = gout.plane(b, c);
            T* ginp = gin.plane(b, c);
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const T* row0 = gp + static_cast<std::size_t>(2 * y) * 2 * w + 2 * x;
                    ginp[static_cast<std::size_t>(y) * w + x] +=
                        row0[0] + row0[1] + row0[2 * w] + row0[2 * w + 1];
                }
            }
        }
    }
}

} // namespace kernels
} // namespace fedseg
