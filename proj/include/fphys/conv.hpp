#pragma once

#include <array>

#include "fphys/ops.hpp"

namespace fphys {

enum class Padding { same, valid };

/// 3-D convolution geometry. Temporal and spatial padding are selected
/// independently; `same` preserves the axis extent at stride 1.
struct ConvSpec {
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::array<std::int64_t, 3> kernel{1, 1, 1};   // (k_t, k_h, k_w)
    std::array<std::int64_t, 3> stride{1, 1, 1};   // (s_t, s_h, s_w)
    Padding temporal_padding = Padding::valid;
    Padding spatial_padding = Padding::valid;
    bool bias = true;

    void validate() const {
        check(in_channels >= 1 && out_channels >= 1, "conv3d: channel counts must be >= 1");
        for (std::size_t i = 0; i < 3; ++i)
            check(kernel[i] >= 1 && kernel[i] <= 32 && stride[i] >= 1,
                  "conv3d: kernel and stride entries must be >= 1");
    }
};

namespace detail {

struct ConvDims {
    std::int64_t n, cin, t, h, w;
    std::int64_t cout, to, ho, wo;
    std::int64_t pad_t, pad_h, pad_w;  // front/top/left padding
};

inline std::int64_t conv_axis_out(std::int64_t in, std::int64_t k, std::int64_t s, Padding p) {
    if (p == Padding::same) return (in + s - 1) / s;
    return (in - k) / s + 1;
}

inline std::int64_t conv_axis_pad(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t s,
                                  Padding p) {
    if (p == Padding::valid) return 0;
    std::int64_t total = (out - 1) * s + k - in;
    return total > 0 ? total / 2 : 0;
}

inline ConvDims conv_dims(const Shape& xshape, const ConvSpec& spec) {
    check(xshape.size() == 5, "conv3d: input must be (N,C,T,H,W), got " + shape_str(xshape));
    ConvDims d{};
    d.n = xshape[0];
    d.cin = xshape[1];
    d.t = xshape[2];
    d.h = xshape[3];
    d.w = xshape[4];
    check(d.cin == spec.in_channels,
          "conv3d: input has " + std::to_string(d.cin) + " channels, spec expects " +
              std::to_string(spec.in_channels));
    d.cout = spec.out_channels;
    d.to = conv_axis_out(d.t, spec.kernel[0], spec.stride[0], spec.temporal_padding);
    d.ho = conv_axis_out(d.h, spec.kernel[1], spec.stride[1], spec.spatial_padding);
    d.wo = conv_axis_out(d.w, spec.kernel[2], spec.stride[2], spec.spatial_padding);
    check(d.t >= (spec.temporal_padding == Padding::valid ? spec.kernel[0] : 1) &&
              d.h >= (spec.spatial_padding == Padding::valid ? spec.kernel[1] : 1) &&
              d.w >= (spec.spatial_padding == Padding::valid ? spec.kernel[2] : 1) && d.to >= 1 &&
              d.ho >= 1 && d.wo >= 1,
          "conv3d: output axis would be < 1 for input " + shape_str(xshape));
    d.pad_t = conv_axis_pad(d.t, d.to, spec.kernel[0], spec.stride[0], spec.temporal_padding);
    d.pad_h = conv_axis_pad(d.h, d.ho, spec.kernel[1], spec.stride[1], spec.spatial_padding);
    d.pad_w = conv_axis_pad(d.w, d.wo, spec.kernel[2], spec.stride[2], spec.spatial_padding);
    return d;
}

// --- direct kernels -------------------------------------------------------
// The inner loops run over the contiguous W axis; rows are short enough that
// the working set per output row stays cache resident, so no im2col buffer
// is needed. Accumulation order is fixed everywhere.

#if defined(__GNUC__)
#define FPHYS_VECEXT 1
// Vector-extension kernels lower to whatever SIMD the target has; the lane
// semantics stay fixed. The psabi note about by-value vector passing is
// irrelevant here because every helper is inlined.
#pragma GCC diagnostic ignored "-Wpsabi"
// Explicit register-width vectors keep the accumulators out of memory; the
// lane layout is fixed (64 bytes) regardless of the target ISA.
template <class T>
struct VecOps {
    typedef T vec __attribute__((vector_size(64)));
    static constexpr std::int64_t width = 64 / static_cast<std::int64_t>(sizeof(T));
    static vec load(const T* p) {
        vec v;
        __builtin_memcpy(&v, p, sizeof(v));
        return v;
    }
    static void store(T* p, vec v) { __builtin_memcpy(p, &v, sizeof(v)); }
    static vec broadcast(T s) { return vec{} + s; }
};
#endif

// acc[w] += sum_dw wk[dw] * xr[w + dw]; unit stride, no spatial padding.
template <class T, int KW>
inline void row_fma(T* acc, const T* xr, const T* wk, std::int64_t wo) {
#ifdef FPHYS_VECEXT
    using V = VecOps<T>;
    typename V::vec kv[KW];
    for (int dw = 0; dw < KW; ++dw) kv[dw] = V::broadcast(wk[dw]);
    std::int64_t w = 0;
    for (; w + V::width <= wo; w += V::width) {
        auto av = V::load(acc + w);
        for (int dw = 0; dw < KW; ++dw) av += kv[dw] * V::load(xr + w + dw);
        V::store(acc + w, av);
    }
    for (; w < wo; ++w) {
        T s = acc[w];
        for (int dw = 0; dw < KW; ++dw) s += wk[dw] * xr[w + dw];
        acc[w] = s;
    }
#else
    for (std::int64_t w = 0; w < wo; ++w) {
        T s = acc[w];
        for (int dw = 0; dw < KW; ++dw) s += wk[dw] * xr[w + dw];
        acc[w] = s;
    }
#endif
}

template <class T>
inline void row_fma_any(T* acc, const T* xr, const T* wk, std::int64_t wo, std::int64_t kw) {
    switch (kw) {
        case 1: row_fma<T, 1>(acc, xr, wk, wo); return;
        case 2: row_fma<T, 2>(acc, xr, wk, wo); return;
        case 3: row_fma<T, 3>(acc, xr, wk, wo); return;
        case 4: row_fma<T, 4>(acc, xr, wk, wo); return;
        case 5: row_fma<T, 5>(acc, xr, wk, wo); return;
        case 7: row_fma<T, 7>(acc, xr, wk, wo); return;
        default:
            for (std::int64_t dw = 0; dw < kw; ++dw) {
                const T k = wk[dw];
                for (std::int64_t w = 0; w < wo; ++w) acc[w] += k * xr[w + dw];
            }
    }
}

// Vectorizable dot product with a fixed lane count, so the reduction order
// does not depend on the target ISA.
template <class T>
inline T lanes_dot(const T* a, const T* b, std::int64_t n) {
    constexpr int L = 16;
    T lanes[L] = {};
    std::int64_t i = 0;
    for (; i + L <= n; i += L)
        for (int j = 0; j < L; ++j) lanes[j] += a[i + j] * b[i + j];
    for (int j = 0; i + j < n; ++j) lanes[j] += a[i + j] * b[i + j];
    T s = T(0);
    for (int j = 0; j < L; ++j) s += lanes[j];
    return s;
}

// Split rows into stride-s phase planes so strided taps become unit-stride:
// plane p holds x[.., w] for w % s == p. Plane widths differ by at most one.
template <class T>
struct PhasePlanes {
    AlignedVec<T> data;
    std::int64_t s = 1, rows = 0, w_in = 0, wp = 0;  // wp = padded plane width

    void build(const T* x, std::int64_t nrows, std::int64_t w, std::int64_t stride) {
        s = stride;
        rows = nrows;
        w_in = w;
        wp = (w + s - 1) / s;
        data.resize(static_cast<std::size_t>(s * nrows * wp));
        for (std::int64_t r = 0; r < nrows; ++r) {
            const T* src = x + r * w;
            for (std::int64_t p = 0; p < s; ++p) {
                T* dst = plane_row(p, r);
                const std::int64_t n = (w - p + s - 1) / s;
                for (std::int64_t i = 0; i < n; ++i) dst[i] = src[i * s + p];
                for (std::int64_t i = n; i < wp; ++i) dst[i] = T(0);
            }
        }
    }

    // zero-filled planes for gradient accumulation
    void zero(std::int64_t nrows, std::int64_t w, std::int64_t stride) {
        s = stride;
        rows = nrows;
        w_in = w;
        wp = (w + s - 1) / s;
        data.assign(static_cast<std::size_t>(s * nrows * wp), T(0));
    }

    T* plane_row(std::int64_t p, std::int64_t r) { return data.data() + (p * rows + r) * wp; }
    const T* plane_row(std::int64_t p, std::int64_t r) const {
        return data.data() + (p * rows + r) * wp;
    }

    // scatter-add planes back into the interleaved layout
    void add_to(T* x) const {
        for (std::int64_t r = 0; r < rows; ++r) {
            T* dst = x + r * w_in;
            for (std::int64_t p = 0; p < s; ++p) {
                const T* src = plane_row(p, r);
                const std::int64_t n = (w_in - p + s - 1) / s;
                for (std::int64_t i = 0; i < n; ++i) dst[i * s + p] += src[i];
            }
        }
    }
};

// Valid output-column range for tap dw: 0 <= w*sw + dw - pad_w < W.
inline std::pair<std::int64_t, std::int64_t> tap_range(std::int64_t wo, std::int64_t w_in,
                                                       std::int64_t sw, std::int64_t dw,
                                                       std::int64_t pw) {
    std::int64_t lo = pw - dw;
    lo = lo <= 0 ? 0 : (lo + sw - 1) / sw;
    std::int64_t hi = (w_in - 1 - dw + pw) / sw;  // inclusive
    if (hi >= wo) hi = wo - 1;
    return {lo, hi + 1};
}

// Row paths: unit stride uses the input rows directly; strided convs without
// spatial padding read/write phase planes (one tap set per phase, offsets
// consecutive, so the unit-stride kernels apply); anything else falls back
// to the scalar tap loop.
enum class RowPath { unit, phased, generic };

inline RowPath row_path(const ConvSpec& spec, const ConvDims& d) {
    if (spec.stride[2] == 1 && d.pad_w == 0) return RowPath::unit;
    if (d.pad_w == 0) return RowPath::phased;
    return RowPath::generic;
}

// One (sample, t_out) slice of the forward pass.
template <class T>
void direct_fwd_slice(const T* x, const PhasePlanes<T>* planes, const T* wgt, const T* bias,
                      T* out, const ConvDims& d, const ConvSpec& spec, std::int64_t t) {
    const std::int64_t kt = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];
    const std::int64_t st = spec.stride[0], sh = spec.stride[1], sw = spec.stride[2];
    const std::int64_t hw_in = d.h * d.w;
    const RowPath path = row_path(spec, d);
    T kbuf[16];
    for (std::int64_t h = 0; h < d.ho; ++h) {
        for (std::int64_t co = 0; co < d.cout; ++co) {
            T* acc = out + ((co * d.to + t) * d.ho + h) * d.wo;
            std::fill(acc, acc + d.wo, bias ? bias[co] : T(0));
            const T* wc = wgt + co * d.cin * kt * kh * kw;
            for (std::int64_t ci = 0; ci < d.cin; ++ci) {
                const T* xc = x + ci * d.t * hw_in;
                for (std::int64_t dt = 0; dt < kt; ++dt) {
                    const std::int64_t ts = t * st + dt - d.pad_t;
                    if (ts < 0 || ts >= d.t) continue;
                    for (std::int64_t dh = 0; dh < kh; ++dh) {
                        const std::int64_t hs = h * sh + dh - d.pad_h;
                        if (hs < 0 || hs >= d.h) continue;
                        const T* wk = wc + ((ci * kt + dt) * kh + dh) * kw;
                        if (path == RowPath::unit) {
                            row_fma_any(acc, xc + ts * hw_in + hs * d.w, wk, d.wo, kw);
                        } else if (path == RowPath::phased) {
                            const std::int64_t row = (ci * d.t + ts) * d.h + hs;
                            for (std::int64_t p = 0; p < sw; ++p) {
                                const std::int64_t taps = (kw - p + sw - 1) / sw;
                                if (taps <= 0) continue;
                                for (std::int64_t o = 0; o < taps; ++o) kbuf[o] = wk[o * sw + p];
                                row_fma_any(acc, planes->plane_row(p, row), kbuf, d.wo, taps);
                            }
                        } else {
                            const T* xr = xc + ts * hw_in + hs * d.w;
                            for (std::int64_t dw = 0; dw < kw; ++dw) {
                                auto [lo, hi] = tap_range(d.wo, d.w, sw, dw, d.pad_w);
                                const T k = wk[dw];
                                for (std::int64_t w = lo; w < hi; ++w)
                                    acc[w] += k * xr[w * sw + dw - d.pad_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Weight gradient for one sample, accumulated into gw (cout*cin*kvol).
// The tap accumulators persist across the whole h extent of a frame, which
// keeps the reduction cost off the inner loop.
template <class T, int KW>
void grad_w_frame_taps(const T* xrows, std::int64_t xrow_stride, const T* grows,
                       std::int64_t ho, std::int64_t sh, std::int64_t pad_h, std::int64_t h_in,
                       std::int64_t dh, std::int64_t wo, T* out, std::int64_t out_stride) {
#ifdef FPHYS_VECEXT
    using V = VecOps<T>;
    typename V::vec acc[KW];
    for (int dw = 0; dw < KW; ++dw) acc[dw] = typename V::vec{};
    T tail[KW] = {};
    for (std::int64_t h = 0; h < ho; ++h) {
        const std::int64_t hs = h * sh + dh - pad_h;
        if (hs < 0 || hs >= h_in) continue;
        const T* a = grows + h * wo;
        const T* b = xrows + hs * xrow_stride;
        std::int64_t w = 0;
        for (; w + V::width <= wo; w += V::width) {
            auto av = V::load(a + w);
            for (int dw = 0; dw < KW; ++dw) acc[dw] += av * V::load(b + w + dw);
        }
        for (; w < wo; ++w)
            for (int dw = 0; dw < KW; ++dw) tail[dw] += a[w] * b[w + dw];
    }
    for (int dw = 0; dw < KW; ++dw) {
        T s = tail[dw];
        for (std::int64_t j = 0; j < V::width; ++j) s += acc[dw][j];
        out[dw * out_stride] += s;
    }
#else
    constexpr int L = 16;
    T lanes[KW][L] = {};
    for (std::int64_t h = 0; h < ho; ++h) {
        const std::int64_t hs = h * sh + dh - pad_h;
        if (hs < 0 || hs >= h_in) continue;
        const T* a = grows + h * wo;
        const T* b = xrows + hs * xrow_stride;
        std::int64_t i = 0;
        for (; i + L <= wo; i += L)
            for (int dw = 0; dw < KW; ++dw)
                for (int j = 0; j < L; ++j) lanes[dw][j] += a[i + j] * b[i + j + dw];
        for (; i < wo; ++i)
            for (int dw = 0; dw < KW; ++dw) lanes[dw][0] += a[i] * b[i + dw];
    }
    for (int dw = 0; dw < KW; ++dw) {
        T s = T(0);
        for (int j = 0; j < L; ++j) s += lanes[dw][j];
        out[dw * out_stride] += s;
    }
#endif
}

template <class T>
void grad_w_frame_taps_any(const T* xrows, std::int64_t xrow_stride, const T* grows,
                           std::int64_t ho, std::int64_t sh, std::int64_t pad_h,
                           std::int64_t h_in, std::int64_t dh, std::int64_t wo, T* out,
                           std::int64_t out_stride, std::int64_t taps) {
    switch (taps) {
        case 1: grad_w_frame_taps<T, 1>(xrows, xrow_stride, grows, ho, sh, pad_h, h_in, dh, wo, out, out_stride); return;
        case 2: grad_w_frame_taps<T, 2>(xrows, xrow_stride, grows, ho, sh, pad_h, h_in, dh, wo, out, out_stride); return;
        case 3: grad_w_frame_taps<T, 3>(xrows, xrow_stride, grows, ho, sh, pad_h, h_in, dh, wo, out, out_stride); return;
        case 4: grad_w_frame_taps<T, 4>(xrows, xrow_stride, grows, ho, sh, pad_h, h_in, dh, wo, out, out_stride); return;
        case 5: grad_w_frame_taps<T, 5>(xrows, xrow_stride, grows, ho, sh, pad_h, h_in, dh, wo, out, out_stride); return;
        case 7: grad_w_frame_taps<T, 7>(xrows, xrow_stride, grows, ho, sh, pad_h, h_in, dh, wo, out, out_stride); return;
        default:
            for (std::int64_t h = 0; h < ho; ++h) {
                const std::int64_t hs = h * sh + dh - pad_h;
                if (hs < 0 || hs >= h_in) continue;
                for (std::int64_t dw = 0; dw < taps; ++dw)
                    out[dw * out_stride] +=
                        lanes_dot(grows + h * wo, xrows + hs * xrow_stride + dw, wo);
            }
    }
}

template <class T>
void direct_grad_w_sample(const T* x, const PhasePlanes<T>* planes, const T* g, T* gw,
                          const ConvDims& d, const ConvSpec& spec) {
    const std::int64_t kt = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];
    const std::int64_t st = spec.stride[0], sh = spec.stride[1], sw = spec.stride[2];
    const std::int64_t hw_in = d.h * d.w;
    const std::int64_t hw_out = d.ho * d.wo;
    const RowPath path = row_path(spec, d);

    if (path == RowPath::generic) {
        for (std::int64_t t = 0; t < d.to; ++t)
            for (std::int64_t h = 0; h < d.ho; ++h)
                for (std::int64_t co = 0; co < d.cout; ++co) {
                    const T* gr = g + (co * d.to + t) * hw_out + h * d.wo;
                    T* gwc = gw + co * d.cin * kt * kh * kw;
                    for (std::int64_t ci = 0; ci < d.cin; ++ci) {
                        const T* xc = x + ci * d.t * hw_in;
                        for (std::int64_t dt = 0; dt < kt; ++dt) {
                            const std::int64_t ts = t * st + dt - d.pad_t;
                            if (ts < 0 || ts >= d.t) continue;
                            for (std::int64_t dh = 0; dh < kh; ++dh) {
                                const std::int64_t hs = h * sh + dh - d.pad_h;
                                if (hs < 0 || hs >= d.h) continue;
                                const T* xr = xc + ts * hw_in + hs * d.w;
                                T* gwk = gwc + ((ci * kt + dt) * kh + dh) * kw;
                                for (std::int64_t dw = 0; dw < kw; ++dw) {
                                    auto [lo, hi] = tap_range(d.wo, d.w, sw, dw, d.pad_w);
                                    T s = T(0);
                                    for (std::int64_t w = lo; w < hi; ++w)
                                        s += gr[w] * xr[w * sw + dw - d.pad_w];
                                    gwk[dw] += s;
                                }
                            }
                        }
                    }
                }
        return;
    }

    for (std::int64_t t = 0; t < d.to; ++t)
        for (std::int64_t co = 0; co < d.cout; ++co) {
            const T* grows = g + (co * d.to + t) * hw_out;
            T* gwc = gw + co * d.cin * kt * kh * kw;
            for (std::int64_t ci = 0; ci < d.cin; ++ci)
                for (std::int64_t dt = 0; dt < kt; ++dt) {
                    const std::int64_t ts = t * st + dt - d.pad_t;
                    if (ts < 0 || ts >= d.t) continue;
                    for (std::int64_t dh = 0; dh < kh; ++dh) {
                        T* gwk = gwc + ((ci * kt + dt) * kh + dh) * kw;
                        if (path == RowPath::unit) {
                            grad_w_frame_taps_any(x + (ci * d.t + ts) * hw_in, d.w, grows, d.ho,
                                                  sh, d.pad_h, d.h, dh, d.wo, gwk, 1, kw);
                        } else {
                            const std::int64_t frame_row = (ci * d.t + ts) * d.h;
                            for (std::int64_t p = 0; p < sw; ++p) {
                                const std::int64_t taps = (kw - p + sw - 1) / sw;
                                if (taps <= 0) continue;
                                grad_w_frame_taps_any(planes->plane_row(p, frame_row), planes->wp,
                                                      grows, d.ho, sh, d.pad_h, d.h, dh, d.wo,
                                                      gwk + p, sw, taps);
                            }
                        }
                    }
                }
        }
}

// Input gradient for one sample. Unit and phased paths run in gather form:
// the output gradient rows are zero-padded once, after which each input row
// accumulates fused row FMAs with the flipped kernel (full correlation).
// Spatially padded convs fall back to the scalar scatter loop.
template <class T>
void direct_grad_x_sample(const T* g, const T* wgt, T* gx, const ConvDims& d,
                          const ConvSpec& spec) {
    const std::int64_t kt = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];
    const std::int64_t st = spec.stride[0], sh = spec.stride[1], sw = spec.stride[2];
    const std::int64_t hw_in = d.h * d.w;
    const std::int64_t hw_out = d.ho * d.wo;
    const RowPath path = row_path(spec, d);

    if (path == RowPath::generic) {
        for (std::int64_t t = 0; t < d.to; ++t)
            for (std::int64_t h = 0; h < d.ho; ++h)
                for (std::int64_t co = 0; co < d.cout; ++co) {
                    const T* gr = g + (co * d.to + t) * hw_out + h * d.wo;
                    const T* wc = wgt + co * d.cin * kt * kh * kw;
                    for (std::int64_t ci = 0; ci < d.cin; ++ci) {
                        T* gc = gx + ci * d.t * hw_in;
                        for (std::int64_t dt = 0; dt < kt; ++dt) {
                            const std::int64_t ts = t * st + dt - d.pad_t;
                            if (ts < 0 || ts >= d.t) continue;
                            for (std::int64_t dh = 0; dh < kh; ++dh) {
                                const std::int64_t hs = h * sh + dh - d.pad_h;
                                if (hs < 0 || hs >= d.h) continue;
                                T* gxr = gc + ts * hw_in + hs * d.w;
                                const T* wk = wc + ((ci * kt + dt) * kh + dh) * kw;
                                for (std::int64_t dw = 0; dw < kw; ++dw) {
                                    auto [lo, hi] = tap_range(d.wo, d.w, sw, dw, d.pad_w);
                                    const T k = wk[dw];
                                    for (std::int64_t w = lo; w < hi; ++w)
                                        gxr[w * sw + dw - d.pad_w] += k * gr[w];
                                }
                            }
                        }
                    }
                }
        return;
    }

    // padded copies of the output-gradient rows
    const std::int64_t pmax = (kw - 1) / sw;          // taps per phase - 1, at most
    const std::int64_t gp_w = d.wo + 2 * pmax;
    AlignedVec<T> gpad;
    gpad.assign(static_cast<std::size_t>(d.cout * d.to * d.ho * gp_w), T(0));
    for (std::int64_t r = 0; r < d.cout * d.to * d.ho; ++r)
        std::copy(g + r * d.wo, g + (r + 1) * d.wo, gpad.data() + r * gp_w + pmax);

    const bool unit = path == RowPath::unit;
    PhasePlanes<T> gplanes;
    if (!unit) gplanes.zero(d.cin * d.t * d.h, d.w, sw);
    T krev[32];

    for (std::int64_t ci = 0; ci < d.cin; ++ci)
        for (std::int64_t ts = 0; ts < d.t; ++ts)
            for (std::int64_t hs = 0; hs < d.h; ++hs) {
                const std::int64_t xrow = (ci * d.t + ts) * d.h + hs;
                for (std::int64_t co = 0; co < d.cout; ++co) {
                    const T* wc = wgt + (co * d.cin + ci) * kt * kh * kw;
                    for (std::int64_t dt = 0; dt < kt; ++dt) {
                        const std::int64_t tnum = ts + d.pad_t - dt;
                        if (tnum < 0 || tnum % st != 0) continue;
                        const std::int64_t t = tnum / st;
                        if (t >= d.to) continue;
                        for (std::int64_t dh = 0; dh < kh; ++dh) {
                            const std::int64_t hnum = hs + d.pad_h - dh;
                            if (hnum < 0 || hnum % sh != 0) continue;
                            const std::int64_t h = hnum / sh;
                            if (h >= d.ho) continue;
                            const T* wk = wc + (dt * kh + dh) * kw;
                            const T* gpr = gpad.data() + ((co * d.to + t) * d.ho + h) * gp_w;
                            if (unit) {
                                // gx[ws] += sum_dw k[dw]*G[ws-dw]
                                for (std::int64_t j = 0; j < kw; ++j) krev[j] = wk[kw - 1 - j];
                                row_fma_any(gx + xrow * d.w, gpr, krev, d.w, kw);
                            } else {
                                for (std::int64_t p = 0; p < sw; ++p) {
                                    const std::int64_t taps = (kw - p + sw - 1) / sw;
                                    if (taps <= 0) continue;
                                    for (std::int64_t j = 0; j < taps; ++j)
                                        krev[j] = wk[(taps - 1 - j) * sw + p];
                                    // strided valid convs may leave trailing input
                                    // columns unused; those receive no gradient
                                    const std::int64_t np = (d.w - p + sw - 1) / sw;
                                    const std::int64_t run = std::min(np, d.wo + pmax);
                                    row_fma_any(gplanes.plane_row(p, xrow),
                                                gpr + pmax - (taps - 1), krev, run, taps);
                                }
                            }
                        }
                    }
                }
            }
    if (!unit) gplanes.add_to(gx);
}

template <class T>
using StridedMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
               Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
               Eigen::OuterStride<>>;

inline bool is_pointwise(const ConvDims& d, const ConvSpec& spec) {
    return spec.kernel == std::array<std::int64_t, 3>{1, 1, 1} &&
           spec.stride == std::array<std::int64_t, 3>{1, 1, 1} && d.pad_t == 0 && d.pad_h == 0 &&
           d.pad_w == 0;
}

}  // namespace detail

/// 3-D convolution over (N,C,T,H,W). Weights are (C_out,C_in,k_t,k_h,k_w);
/// bias, when the spec enables it, is (C_out). Differentiable w.r.t. x,
/// weights and bias.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weights,
                 const Tensor<T>& bias = {}) {
    spec.validate();
    const detail::ConvDims d = detail::conv_dims(x.shape(), spec);
    const Shape wshape{spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1],
                       spec.kernel[2]};
    check(weights.defined() && weights.shape() == wshape,
          "conv3d: weight shape must be " + shape_str(wshape));
    if (spec.bias)
        check(bias.defined() && bias.shape() == Shape{spec.out_channels},
              "conv3d: bias shape must be (" + std::to_string(spec.out_channels) + ")");
    else
        check(!bias.defined(), "conv3d: bias passed but spec.bias is false");

    Tensor<T> out = Tensor<T>::empty({d.n, d.cout, d.to, d.ho, d.wo});
    const std::int64_t hw_out = d.ho * d.wo;
    const std::int64_t sample_in = d.cin * d.t * d.h * d.w;
    const std::int64_t sample_out = d.cout * d.to * hw_out;
    const bool pointwise = detail::is_pointwise(d, spec);
    const T* px = x.data();
    const T* pw = weights.data();
    const T* pb = spec.bias ? bias.data() : nullptr;
    T* po = out.data();

    if (pointwise) {
        parallel_for(d.n, [&](std::int64_t nidx) {
            detail::ConstMatMap<T> W(pw, d.cout, d.cin);
            detail::ConstMatMap<T> X(px + nidx * sample_in, d.cin, d.t * hw_out);
            detail::MatMap<T> O(po + nidx * sample_out, d.cout, d.t * hw_out);
            O.noalias() = W * X;
            if (pb)
                for (std::int64_t c = 0; c < d.cout; ++c) O.row(c).array() += pb[c];
        });
    } else {
        const bool phased = detail::row_path(spec, d) == detail::RowPath::phased;
        std::vector<detail::PhasePlanes<T>> planes(phased ? static_cast<std::size_t>(d.n) : 0);
        if (phased)
            parallel_for(d.n, [&](std::int64_t nidx) {
                planes[static_cast<std::size_t>(nidx)].build(px + nidx * sample_in,
                                                             d.cin * d.t * d.h, d.w,
                                                             spec.stride[2]);
            });
        parallel_for(d.n * d.to, [&](std::int64_t task) {
            const std::int64_t nidx = task / d.to;
            const std::int64_t t = task % d.to;
            detail::direct_fwd_slice(px + nidx * sample_in,
                                     phased ? &planes[static_cast<std::size_t>(nidx)] : nullptr,
                                     pw, pb, po + nidx * sample_out, d, spec, t);
        });
    }

    auto sx = x.storage(), sw = weights.storage(), so = out.storage();
    auto sb = spec.bias ? bias.storage() : nullptr;
    detail::finish_op<T>("conv3d", out, {&x, &weights, &bias}, [sx, sw, sb, so, spec, d,
                                                                pointwise]() {
        const std::int64_t hw_out = d.ho * d.wo;
        const std::int64_t sample_in = d.cin * d.t * d.h * d.w;
        const std::int64_t sample_out = d.cout * d.to * hw_out;
        const T* g = so->grad.data();
        const T* px = sx->data.data();
        const T* pw = sw->data.data();

        if (sb) {
            if (T* gb = detail::grad_sink(sb)) {
                for (std::int64_t nidx = 0; nidx < d.n; ++nidx)
                    for (std::int64_t c = 0; c < d.cout; ++c)
                        gb[c] += detail::ConstArrMap<T>(g + nidx * sample_out + c * d.to * hw_out,
                                                        d.to * hw_out)
                                     .sum();
            }
        }

        if (T* gw = detail::grad_sink(sw)) {
            const std::int64_t wnum = static_cast<std::int64_t>(sw->data.size());
            if (pointwise) {
                AlignedVec<T> partials(static_cast<std::size_t>(d.n * wnum));
                parallel_for(d.n, [&](std::int64_t nidx) {
                    detail::ConstMatMap<T> G(g + nidx * sample_out, d.cout, d.t * hw_out);
                    detail::ConstMatMap<T> X(px + nidx * sample_in, d.cin, d.t * hw_out);
                    detail::MatMap<T>(partials.data() + nidx * wnum, d.cout, d.cin).noalias() =
                        G * X.transpose();
                });
                for (std::int64_t nidx = 0; nidx < d.n; ++nidx)
                    detail::grad_arr(gw, wnum) +=
                        detail::ConstArrMap<T>(partials.data() + nidx * wnum, wnum);
            } else {
                const bool phased = detail::row_path(spec, d) == detail::RowPath::phased;
                AlignedVec<T> partials;
                partials.assign(static_cast<std::size_t>(d.n * wnum), T(0));
                parallel_for(d.n, [&](std::int64_t nidx) {
                    detail::PhasePlanes<T> planes;
                    if (phased)
                        planes.build(px + nidx * sample_in, d.cin * d.t * d.h, d.w,
                                     spec.stride[2]);
                    detail::direct_grad_w_sample(px + nidx * sample_in,
                                                 phased ? &planes : nullptr, g + nidx * sample_out,
                                                 partials.data() + nidx * wnum, d, spec);
                });
                for (std::int64_t nidx = 0; nidx < d.n; ++nidx)
                    detail::grad_arr(gw, wnum) +=
                        detail::ConstArrMap<T>(partials.data() + nidx * wnum, wnum);
            }
        }

        if (T* gx = detail::grad_sink(sx)) {
            parallel_for(d.n, [&](std::int64_t nidx) {
                if (pointwise) {
                    detail::ConstMatMap<T> G(g + nidx * sample_out, d.cout, d.t * hw_out);
                    detail::ConstMatMap<T> W(pw, d.cout, d.cin);
                    detail::MatMap<T>(gx + nidx * sample_in, d.cin, d.t * hw_out).noalias() +=
                        W.transpose() * G;
                } else {
                    detail::direct_grad_x_sample(g + nidx * sample_out, pw, gx + nidx * sample_in,
                                                 d, spec);
                }
            });
        }
    });
    return out;
}

/// Output shape of conv3d without running it.
inline Shape conv3d_out_shape(const Shape& xshape, const ConvSpec& spec) {
    const detail::ConvDims d = detail::conv_dims(xshape, spec);
    return {d.n, d.cout, d.to, d.ho, d.wo};
}

}  // namespace fphys
