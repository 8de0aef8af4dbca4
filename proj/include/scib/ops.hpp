#pragma once

#include <algorithm>
#include <cmath>
#include <tuple>

#if defined(__AVX2__)
#include <immintrin.h>
#endif

#include "scib/tensor.hpp"

// Differentiable layer kernel. Every op is a pure function of its inputs
// (plus an explicit RngStream where randomness is involved). Convolution
// accumulates in 64-bit with a fixed (c, ky, kx) per-element summation order
// so results are independent of how the outer loops are arranged.

namespace scib::ops {

enum class DropoutMode { train, mc_sample, off };

template <typename T>
struct ConvGrads {
    TensorT<T> input;
    TensorT<T> kernel;
    TensorT<T> bias;
};

namespace detail {

template <typename T>
void check_conv_shapes(const TensorT<T>& x, const TensorT<T>& k, const TensorT<T>& b,
                       int stride, int pad) {
    if (x.rank() != 4 || k.rank() != 4)
        throw ShapeError("conv2d: expected 4-axis input " + shape_str(x.shape) + " and kernel " +
                         shape_str(k.shape));
    if (b.rank() != 1 || b.dim(0) != k.dim(0))
        throw ShapeError("conv2d: bias " + shape_str(b.shape) + " must match kernel count " +
                         std::to_string(k.dim(0)));
    if (x.dim(1) != k.dim(1))
        throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " != kernel channels " + std::to_string(k.dim(1)));
    if (k.dim(2) % 2 == 0 || k.dim(3) % 2 == 0)
        throw ShapeError("conv2d: kernel extents must be odd, got " + shape_str(k.shape));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (pad < 0) throw ShapeError("conv2d: padding must be >= 0");
    if (x.dim(2) + 2 * pad < k.dim(2) || x.dim(3) + 2 * pad < k.dim(3))
        throw ShapeError("conv2d: padded input " + shape_str(x.shape) +
                         " smaller than kernel " + shape_str(k.shape));
}

// Fused-tap interior pass for stride-1 square kernels: adds one channel's
// K*K contributions to an accumulator row in (ky, kx) order per element.
// The AVX2 path applies each tap as broadcast-multiply-add across a block of
// four output columns; that is the same per-element summation order as the
// scalar code (and the test oracle), only evaluated four elements at a time.
#if defined(__AVX2__)
inline __m256d load4d(const float* p) { return _mm256_cvtps_pd(_mm_loadu_ps(p)); }
inline __m256d load4d(const double* p) { return _mm256_loadu_pd(p); }

// Fma=false keeps separately rounded multiply and add so results equal the
// strict-order direct sum; gradient paths pass Fma=true for throughput.
template <bool Fma>
inline __m256d macc(__m256d a, __m256d w, __m256d x) {
    if constexpr (Fma)
        return _mm256_fmadd_pd(w, x, a);
    else
        return _mm256_add_pd(a, _mm256_mul_pd(w, x));
}

template <int K, bool Fma, typename T>
void conv_interior_row(double* arow, const T* xc, const T* kc, int yo, int W, int pad, int x_lo,
                       int x_hi) {
    int xo = x_lo;
    for (; xo + 4 <= x_hi; xo += 4) {
        __m256d a = _mm256_loadu_pd(arow + xo);
        for (int ky = 0; ky < K; ++ky) {
            const T* xrow = xc + static_cast<size_t>(yo + ky - pad) * W + (xo - pad);
            for (int kx = 0; kx < K; ++kx)
                a = macc<Fma>(a, _mm256_set1_pd(static_cast<double>(kc[ky * K + kx])),
                              load4d(xrow + kx));
        }
        _mm256_storeu_pd(arow + xo, a);
    }
    for (; xo < x_hi; ++xo) {
        double a = arow[xo];
        for (int ky = 0; ky < K; ++ky) {
            const T* xrow = xc + static_cast<size_t>(yo + ky - pad) * W + (xo - pad);
            for (int kx = 0; kx < K; ++kx)
                a += static_cast<double>(kc[ky * K + kx]) * static_cast<double>(xrow[kx]);
        }
        arow[xo] = a;
    }
}

// Four interior rows at the same column block, four independent accumulator
// chains, so the serial per-element add order stops being the bottleneck.
template <int K, bool Fma, typename T>
void conv_interior_rows4(double* acc, int Wo, const T* xc, const T* kc, int yo, int W, int pad,
                         int x_lo, int x_hi) {
    int xo = x_lo;
    for (; xo + 4 <= x_hi; xo += 4) {
        __m256d a0 = _mm256_loadu_pd(acc + static_cast<size_t>(yo) * Wo + xo);
        __m256d a1 = _mm256_loadu_pd(acc + static_cast<size_t>(yo + 1) * Wo + xo);
        __m256d a2 = _mm256_loadu_pd(acc + static_cast<size_t>(yo + 2) * Wo + xo);
        __m256d a3 = _mm256_loadu_pd(acc + static_cast<size_t>(yo + 3) * Wo + xo);
        for (int ky = 0; ky < K; ++ky) {
            const T* xrow = xc + static_cast<size_t>(yo + ky - pad) * W + (xo - pad);
            for (int kx = 0; kx < K; ++kx) {
                const __m256d w = _mm256_set1_pd(static_cast<double>(kc[ky * K + kx]));
                a0 = macc<Fma>(a0, w, load4d(xrow + kx));
                a1 = macc<Fma>(a1, w, load4d(xrow + W + kx));
                a2 = macc<Fma>(a2, w, load4d(xrow + 2 * W + kx));
                a3 = macc<Fma>(a3, w, load4d(xrow + 3 * W + kx));
            }
        }
        _mm256_storeu_pd(acc + static_cast<size_t>(yo) * Wo + xo, a0);
        _mm256_storeu_pd(acc + static_cast<size_t>(yo + 1) * Wo + xo, a1);
        _mm256_storeu_pd(acc + static_cast<size_t>(yo + 2) * Wo + xo, a2);
        _mm256_storeu_pd(acc + static_cast<size_t>(yo + 3) * Wo + xo, a3);
    }
    for (int r = 0; r < 4; ++r)
        conv_interior_row<K, Fma>(acc + static_cast<size_t>(yo + r) * Wo, xc, kc, yo + r, W, pad,
                                  xo, x_hi);
}

template <int K, bool Fma, typename T>
void conv_interior(double* acc, int Wo, const T* xc, const T* kc, int W, int pad, int y_lo,
                   int y_hi, int x_lo, int x_hi) {
    int yo = y_lo;
    for (; yo + 4 <= y_hi; yo += 4)
        conv_interior_rows4<K, Fma>(acc, Wo, xc, kc, yo, W, pad, x_lo, x_hi);
    for (; yo < y_hi; ++yo)
        conv_interior_row<K, Fma>(acc + static_cast<size_t>(yo) * Wo, xc, kc, yo, W, pad, x_lo,
                                  x_hi);
}

// Multichannel variants: the channel loop runs inside the register-resident
// accumulator block, so each output element sums its full C*K*K tap set in
// ascending (c, ky, kx) order without spilling the accumulator per channel.
template <int K, bool Fma, typename T>
void conv_interior_mc_row(double* arow, int Wo, const T* xbase, size_t cstride, const T* kbase,
                          int C, int yo, int W) {
    int xo = 0;
    for (; xo + 4 <= Wo; xo += 4) {
        __m256d a = _mm256_loadu_pd(arow + xo);
        for (int c = 0; c < C; ++c) {
            const T* xrow = xbase + c * cstride + static_cast<size_t>(yo) * W + xo;
            const T* kc = kbase + static_cast<size_t>(c) * K * K;
            for (int ky = 0; ky < K; ++ky)
                for (int kx = 0; kx < K; ++kx)
                    a = macc<Fma>(a, _mm256_set1_pd(static_cast<double>(kc[ky * K + kx])),
                                  load4d(xrow + static_cast<size_t>(ky) * W + kx));
        }
        _mm256_storeu_pd(arow + xo, a);
    }
    for (; xo < Wo; ++xo) {
        double a = arow[xo];
        for (int c = 0; c < C; ++c) {
            const T* xrow = xbase + c * cstride + static_cast<size_t>(yo) * W + xo;
            const T* kc = kbase + static_cast<size_t>(c) * K * K;
            for (int ky = 0; ky < K; ++ky)
                for (int kx = 0; kx < K; ++kx)
                    a += static_cast<double>(kc[ky * K + kx]) *
                         static_cast<double>(xrow[static_cast<size_t>(ky) * W + kx]);
        }
        arow[xo] = a;
    }
}

template <int K, bool Fma, typename T>
void conv_interior_mc_rows4(double* acc, int Wo, const T* xbase, size_t cstride, const T* kbase,
                            int C, int yo, int W) {
    int xo = 0;
    for (; xo + 4 <= Wo; xo += 4) {
        __m256d a0 = _mm256_loadu_pd(acc + static_cast<size_t>(yo) * Wo + xo);
        __m256d a1 = _mm256_loadu_pd(acc + static_cast<size_t>(yo + 1) * Wo + xo);
        __m256d a2 = _mm256_loadu_pd(acc + static_cast<size_t>(yo + 2) * Wo + xo);
        __m256d a3 = _mm256_loadu_pd(acc + static_cast<size_t>(yo + 3) * Wo + xo);
        for (int c = 0; c < C; ++c) {
            const T* xrow = xbase + c * cstride + static_cast<size_t>(yo) * W + xo;
            const T* kc = kbase + static_cast<size_t>(c) * K * K;
            for (int ky = 0; ky < K; ++ky) {
                const T* xr = xrow + static_cast<size_t>(ky) * W;
                for (int kx = 0; kx < K; ++kx) {
                    const __m256d w = _mm256_set1_pd(static_cast<double>(kc[ky * K + kx]));
                    a0 = macc<Fma>(a0, w, load4d(xr + kx));
                    a1 = macc<Fma>(a1, w, load4d(xr + W + kx));
                    a2 = macc<Fma>(a2, w, load4d(xr + 2 * W + kx));
                    a3 = macc<Fma>(a3, w, load4d(xr + 3 * W + kx));
                }
            }
        }
        _mm256_storeu_pd(acc + static_cast<size_t>(yo) * Wo + xo, a0);
        _mm256_storeu_pd(acc + static_cast<size_t>(yo + 1) * Wo + xo, a1);
        _mm256_storeu_pd(acc + static_cast<size_t>(yo + 2) * Wo + xo, a2);
        _mm256_storeu_pd(acc + static_cast<size_t>(yo + 3) * Wo + xo, a3);
    }
    for (int r = 0; r < 4; ++r)
        for (int x2 = xo; x2 < Wo; ++x2) {
            double a = acc[static_cast<size_t>(yo + r) * Wo + x2];
            for (int c = 0; c < C; ++c) {
                const T* xrow = xbase + c * cstride + static_cast<size_t>(yo + r) * W + x2;
                const T* kc = kbase + static_cast<size_t>(c) * K * K;
                for (int ky = 0; ky < K; ++ky)
                    for (int kx = 0; kx < K; ++kx)
                        a += static_cast<double>(kc[ky * K + kx]) *
                             static_cast<double>(xrow[static_cast<size_t>(ky) * W + kx]);
            }
            acc[static_cast<size_t>(yo + r) * Wo + x2] = a;
        }
}

template <int K, bool Fma, typename T>
void conv_interior_mc(double* acc, int Wo, const T* xbase, size_t cstride, const T* kbase, int C,
                      int W, int Ho) {
    int yo = 0;
    for (; yo + 4 <= Ho; yo += 4)
        conv_interior_mc_rows4<K, Fma>(acc, Wo, xbase, cstride, kbase, C, yo, W);
    for (; yo < Ho; ++yo)
        conv_interior_mc_row<K, Fma>(acc + static_cast<size_t>(yo) * Wo, Wo, xbase, cstride,
                                     kbase, C, yo, W);
}
#else
template <int K, bool Fma, typename T>
void conv_interior_row(double* arow, const T* xc, const T* kc, int yo, int W, int pad, int x_lo,
                       int x_hi) {
    for (int xo = x_lo; xo < x_hi; ++xo) {
        double a = arow[xo];
        for (int ky = 0; ky < K; ++ky) {
            const T* xrow = xc + static_cast<size_t>(yo + ky - pad) * W + (xo - pad);
            for (int kx = 0; kx < K; ++kx)
                a += static_cast<double>(kc[ky * K + kx]) * static_cast<double>(xrow[kx]);
        }
        arow[xo] = a;
    }
}

template <int K, bool Fma, typename T>
void conv_interior(double* acc, int Wo, const T* xc, const T* kc, int W, int pad, int y_lo,
                   int y_hi, int x_lo, int x_hi) {
    for (int yo = y_lo; yo < y_hi; ++yo)
        conv_interior_row<K, Fma>(acc + static_cast<size_t>(yo) * Wo, xc, kc, yo, W, pad, x_lo,
                                  x_hi);
}

template <int K, bool Fma, typename T>
void conv_interior_mc(double* acc, int Wo, const T* xbase, size_t cstride, const T* kbase, int C,
                      int W, int Ho) {
    for (int yo = 0; yo < Ho; ++yo)
        for (int xo = 0; xo < Wo; ++xo) {
            double a = acc[static_cast<size_t>(yo) * Wo + xo];
            for (int c = 0; c < C; ++c) {
                const T* xrow = xbase + c * cstride + static_cast<size_t>(yo) * W + xo;
                const T* kc = kbase + static_cast<size_t>(c) * K * K;
                for (int ky = 0; ky < K; ++ky)
                    for (int kx = 0; kx < K; ++kx)
                        a += static_cast<double>(kc[ky * K + kx]) *
                             static_cast<double>(xrow[static_cast<size_t>(ky) * W + kx]);
            }
            acc[static_cast<size_t>(yo) * Wo + xo] = a;
        }
}
#endif

// Kernel-gradient tap sums for one (filter, channel) pair against a padded
// input plane: out[ky*K+kx] += sum_{yo,xo} u[yo][xo] * xp[yo+ky][xo+kx].
// Gradient sums carry no fixed-order contract, so the AVX2 path uses FMA.
#if defined(__AVX2__)
inline double hsum4d(__m256d v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

template <int K, typename T>
void kernel_grad_taps(double* out, const T* xp, int Wp, const T* u, int Ho, int Wo) {
    for (int ky = 0; ky < K; ++ky) {
        __m256d acc[K];
        double tail[K];
        for (int kx = 0; kx < K; ++kx) {
            acc[kx] = _mm256_setzero_pd();
            tail[kx] = 0.0;
        }
        for (int yo = 0; yo < Ho; ++yo) {
            const T* urow = u + static_cast<size_t>(yo) * Wo;
            const T* xrow = xp + static_cast<size_t>(yo + ky) * Wp;
            int xo = 0;
            for (; xo + 4 <= Wo; xo += 4) {
                const __m256d uv = load4d(urow + xo);
                for (int kx = 0; kx < K; ++kx)
                    acc[kx] = _mm256_fmadd_pd(uv, load4d(xrow + xo + kx), acc[kx]);
            }
            for (; xo < Wo; ++xo)
                for (int kx = 0; kx < K; ++kx)
                    tail[kx] += static_cast<double>(urow[xo]) * static_cast<double>(xrow[xo + kx]);
        }
        for (int kx = 0; kx < K; ++kx) out[ky * K + kx] += hsum4d(acc[kx]) + tail[kx];
    }
}
#else
template <int K, typename T>
void kernel_grad_taps(double* out, const T* xp, int Wp, const T* u, int Ho, int Wo) {
    for (int ky = 0; ky < K; ++ky)
        for (int kx = 0; kx < K; ++kx) {
            double s = 0.0;
            for (int yo = 0; yo < Ho; ++yo) {
                const T* urow = u + static_cast<size_t>(yo) * Wo;
                const T* xrow = xp + static_cast<size_t>(yo + ky) * Wp + kx;
                for (int xo = 0; xo < Wo; ++xo)
                    s += static_cast<double>(urow[xo]) * static_cast<double>(xrow[xo]);
            }
            out[ky * K + kx] += s;
        }
}
#endif

}  // namespace detail

// Fma is an internal knob: gradient paths, which carry no summation-order
// contract, request fused multiply-add in the interior kernels.
template <typename T, bool Fma = false>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& k, const TensorT<T>& b, int stride,
                  int pad) {
    detail::check_conv_shapes(x, k, b, stride, pad);
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int F = k.dim(0), kH = k.dim(2), kW = k.dim(3);
    const int Ho = (H + 2 * pad - kH) / stride + 1;
    const int Wo = (W + 2 * pad - kW) / stride + 1;

    TensorT<T> y({N, F, Ho, Wo});
    // "Same"-style unit-stride square kernels take a fast path: the input is
    // copied into a zero-padded plane so every output element is interior and
    // the fused tap kernel applies everywhere. Out-of-range taps contribute
    // w * 0.0, which leaves the accumulator value unchanged, so results equal
    // the skip-out-of-range direct sum. Both paths add each element's terms
    // in ascending (c, ky, kx) order.
    const bool fused = stride == 1 && kH == kW && 2 * pad == kH - 1 &&
                       (kH == 1 || kH == 3 || kH == 5);
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    std::vector<T> xpad;
    if (fused && pad > 0) xpad.assign(static_cast<size_t>(C) * Hp * Wp, T(0));
    std::vector<double> acc(static_cast<size_t>(Ho) * Wo);
    for (int n = 0; n < N; ++n) {
        if (fused && pad > 0)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i)
                    std::copy_n(&x.at(n, c, i, 0), W,
                                &xpad[(static_cast<size_t>(c) * Hp + i + pad) * Wp + pad]);
        for (int f = 0; f < F; ++f) {
            std::fill(acc.begin(), acc.end(), static_cast<double>(b.data[static_cast<size_t>(f)]));
            if (fused) {
                const T* xbase = pad > 0 ? xpad.data() : &x.at(n, 0, 0, 0);
                const T* kbase = &k.at(f, 0, 0, 0);
                const size_t cstride = static_cast<size_t>(Hp) * Wp;
                if (kH == 3)
                    detail::conv_interior_mc<3, Fma>(acc.data(), Wo, xbase, cstride, kbase, C, Wp,
                                                     Ho);
                else if (kH == 5)
                    detail::conv_interior_mc<5, Fma>(acc.data(), Wo, xbase, cstride, kbase, C, Wp,
                                                     Ho);
                else
                    detail::conv_interior_mc<1, Fma>(acc.data(), Wo, xbase, cstride, kbase, C, Wp,
                                                     Ho);
                T* yr = &y.at(n, f, 0, 0);
                for (size_t i = 0; i < acc.size(); ++i) yr[i] = static_cast<T>(acc[i]);
                continue;
            }
            for (int c = 0; c < C; ++c) {
                for (int ky = 0; ky < kH; ++ky) {
                    for (int kx = 0; kx < kW; ++kx) {
                        const double w = k.at(f, c, ky, kx);
                        for (int yo = 0; yo < Ho; ++yo) {
                            const int iy = yo * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const T* xrow = &x.at(n, c, iy, 0);
                            double* arow = &acc[static_cast<size_t>(yo) * Wo];
                            // xo range with ix = xo*stride + kx - pad in [0, W)
                            const int xo_lo = kx < pad ? (pad - kx + stride - 1) / stride : 0;
                            const int xo_hi = std::min(Wo, (W - 1 - kx + pad) / stride + 1);
                            if (stride == 1) {
                                // unit-stride fast path: contiguous, vectorizable
                                const T* xp = xrow + xo_lo + kx - pad;
                                double* ap = arow + xo_lo;
                                const int cnt = xo_hi - xo_lo;
                                for (int i = 0; i < cnt; ++i)
                                    ap[i] += w * static_cast<double>(xp[i]);
                            } else {
                                for (int xo = xo_lo; xo < xo_hi; ++xo)
                                    arow[xo] +=
                                        w * static_cast<double>(xrow[xo * stride + kx - pad]);
                            }
                        }
                    }
                }
            }
            T* yrow = &y.at(n, f, 0, 0);
            for (size_t i = 0; i < acc.size(); ++i) yrow[i] = static_cast<T>(acc[i]);
        }
    }
    return y;
}

template <typename T>
ConvGrads<T> conv2d_grad(const TensorT<T>& x, const TensorT<T>& k, const TensorT<T>& b,
                         const TensorT<T>& up, int stride, int pad) {
    detail::check_conv_shapes(x, k, b, stride, pad);
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int F = k.dim(0), kH = k.dim(2), kW = k.dim(3);
    const int Ho = (H + 2 * pad - kH) / stride + 1;
    const int Wo = (W + 2 * pad - kW) / stride + 1;
    if (up.shape != std::vector<int>{N, F, Ho, Wo})
        throw ShapeError("conv2d_grad: upstream " + shape_str(up.shape) + " != forward output [" +
                         std::to_string(N) + "," + std::to_string(F) + "," + std::to_string(Ho) +
                         "," + std::to_string(Wo) + "]");

    ConvGrads<T> g;
    g.input = TensorT<T>(x.shape);
    g.kernel = TensorT<T>(k.shape);
    g.bias = TensorT<T>(b.shape);

    // bias: plain sum of upstream per filter
    for (int f = 0; f < F; ++f) {
        double s = 0.0;
        for (int n = 0; n < N; ++n) {
            const T* u = &up.at(n, f, 0, 0);
            for (int i = 0; i < Ho * Wo; ++i) s += u[i];
        }
        g.bias.data[static_cast<size_t>(f)] = static_cast<T>(s);
    }

    // kernel grad: correlation of input with upstream
    const bool fused = stride == 1 && kH == kW && 2 * pad == kH - 1 &&
                       (kH == 1 || kH == 3 || kH == 5);
    if (fused) {
        const int Hp = H + 2 * pad, Wp = W + 2 * pad;
        std::vector<T> xpad;
        const T* xbase = x.data.data();
        if (pad > 0) {
            xpad.assign(static_cast<size_t>(N) * C * Hp * Wp, T(0));
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < H; ++i)
                        std::copy_n(
                            &x.at(n, c, i, 0), W,
                            &xpad[((static_cast<size_t>(n) * C + c) * Hp + i + pad) * Wp + pad]);
            xbase = xpad.data();
        }
        std::vector<double> taps(static_cast<size_t>(kH) * kW);
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c) {
                std::fill(taps.begin(), taps.end(), 0.0);
                for (int n = 0; n < N; ++n) {
                    const T* xp = xbase + (static_cast<size_t>(n) * C + c) * Hp * Wp;
                    const T* u = &up.at(n, f, 0, 0);
                    if (kH == 3)
                        detail::kernel_grad_taps<3>(taps.data(), xp, Wp, u, Ho, Wo);
                    else if (kH == 5)
                        detail::kernel_grad_taps<5>(taps.data(), xp, Wp, u, Ho, Wo);
                    else
                        detail::kernel_grad_taps<1>(taps.data(), xp, Wp, u, Ho, Wo);
                }
                for (int ky = 0; ky < kH; ++ky)
                    for (int kx = 0; kx < kW; ++kx)
                        g.kernel.at(f, c, ky, kx) =
                            static_cast<T>(taps[static_cast<size_t>(ky) * kW + kx]);
            }
        TensorT<T> kt({C, F, kH, kW});
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c)
                for (int ky = 0; ky < kH; ++ky)
                    for (int kx = 0; kx < kW; ++kx)
                        kt.at(c, f, ky, kx) = k.at(f, c, kH - 1 - ky, kW - 1 - kx);
        TensorT<T> zb({C});
        g.input = conv2d<T, true>(up, kt, zb, 1, kH - 1 - pad);
        return g;
    }
    std::vector<double> kacc(static_cast<size_t>(kH) * kW);
    for (int f = 0; f < F; ++f) {
        for (int c = 0; c < C; ++c) {
            std::fill(kacc.begin(), kacc.end(), 0.0);
            for (int n = 0; n < N; ++n) {
                for (int ky = 0; ky < kH; ++ky) {
                    for (int kx = 0; kx < kW; ++kx) {
                        double s = 0.0;
                        for (int yo = 0; yo < Ho; ++yo) {
                            const int iy = yo * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const T* xrow = &x.at(n, c, iy, 0);
                            const T* urow = &up.at(n, f, yo, 0);
                            const int xo_lo = kx < pad ? (pad - kx + stride - 1) / stride : 0;
                            const int xo_hi = std::min(Wo, (W - 1 - kx + pad) / stride + 1);
                            if (stride == 1) {
                                // four independent partial sums so the reduction
                                // pipelines/vectorizes; summation order is free here
                                const T* xp = xrow + xo_lo + kx - pad;
                                const T* uq = urow + xo_lo;
                                const int cnt = xo_hi - xo_lo;
                                double l0 = 0, l1 = 0, l2 = 0, l3 = 0;
                                int i = 0;
                                for (; i + 4 <= cnt; i += 4) {
                                    l0 += static_cast<double>(uq[i]) * static_cast<double>(xp[i]);
                                    l1 += static_cast<double>(uq[i + 1]) *
                                          static_cast<double>(xp[i + 1]);
                                    l2 += static_cast<double>(uq[i + 2]) *
                                          static_cast<double>(xp[i + 2]);
                                    l3 += static_cast<double>(uq[i + 3]) *
                                          static_cast<double>(xp[i + 3]);
                                }
                                for (; i < cnt; ++i)
                                    l0 += static_cast<double>(uq[i]) * static_cast<double>(xp[i]);
                                s += (l0 + l1) + (l2 + l3);
                            } else {
                                for (int xo = xo_lo; xo < xo_hi; ++xo)
                                    s += static_cast<double>(urow[xo]) *
                                         static_cast<double>(xrow[xo * stride + kx - pad]);
                            }
                        }
                        kacc[static_cast<size_t>(ky) * kW + kx] += s;
                    }
                }
            }
            for (int ky = 0; ky < kH; ++ky)
                for (int kx = 0; kx < kW; ++kx)
                    g.kernel.at(f, c, ky, kx) = static_cast<T>(kacc[static_cast<size_t>(ky) * kW + kx]);
        }
    }

    // input grad. For unit stride it is a full correlation of the upstream
    // with the channel-transposed, spatially flipped kernel, so the forward
    // fast path can be reused; otherwise scatter upstream through the kernel.
    if (stride == 1 && kH == kW && pad <= kH - 1) {
        TensorT<T> kt({C, F, kH, kW});
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c)
                for (int ky = 0; ky < kH; ++ky)
                    for (int kx = 0; kx < kW; ++kx)
                        kt.at(c, f, ky, kx) = k.at(f, c, kH - 1 - ky, kW - 1 - kx);
        TensorT<T> zb({C});
        g.input = conv2d<T, true>(up, kt, zb, 1, kH - 1 - pad);
        return g;
    }
    std::vector<double> xacc(static_cast<size_t>(H) * W);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            std::fill(xacc.begin(), xacc.end(), 0.0);
            for (int f = 0; f < F; ++f) {
                for (int ky = 0; ky < kH; ++ky) {
                    for (int kx = 0; kx < kW; ++kx) {
                        const double w = k.at(f, c, ky, kx);
                        for (int yo = 0; yo < Ho; ++yo) {
                            const int iy = yo * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const T* urow = &up.at(n, f, yo, 0);
                            double* xrow = &xacc[static_cast<size_t>(iy) * W];
                            const int xo_lo = kx < pad ? (pad - kx + stride - 1) / stride : 0;
                            const int xo_hi = std::min(Wo, (W - 1 - kx + pad) / stride + 1);
                            if (stride == 1) {
                                double* xq = xrow + xo_lo + kx - pad;
                                const T* uq = urow + xo_lo;
                                const int cnt = xo_hi - xo_lo;
                                for (int i = 0; i < cnt; ++i)
                                    xq[i] += w * static_cast<double>(uq[i]);
                            } else {
                                for (int xo = xo_lo; xo < xo_hi; ++xo)
                                    xrow[xo * stride + kx - pad] +=
                                        w * static_cast<double>(urow[xo]);
                            }
                        }
                    }
                }
            }
            T* grow = &g.input.at(n, c, 0, 0);
            for (size_t i = 0; i < xacc.size(); ++i) grow[i] = static_cast<T>(xacc[i]);
        }
    }
    return g;
}

template <typename T>
TensorT<T> nearest_upsample(const TensorT<T>& x, int factor) {
    if (x.rank() != 4) throw ShapeError("nearest_upsample: expected 4-axis input");
    if (factor < 1) throw ShapeError("nearest_upsample: factor must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> y({N, C, H * factor, W * factor});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H * factor; ++i) {
                const T* src = &x.at(n, c, i / factor, 0);
                T* dst = &y.at(n, c, i, 0);
                for (int j = 0; j < W * factor; ++j) dst[j] = src[j / factor];
            }
    return y;
}

template <typename T>
TensorT<T> nearest_upsample_grad(const TensorT<T>& up, int factor, int H, int W) {
    if (up.rank() != 4) throw ShapeError("nearest_upsample_grad: expected 4-axis upstream");
    if (up.dim(2) != H * factor || up.dim(3) != W * factor)
        throw ShapeError("nearest_upsample_grad: upstream " + shape_str(up.shape) +
                         " does not match source " + std::to_string(H) + "x" + std::to_string(W));
    const int N = up.dim(0), C = up.dim(1);
    TensorT<T> g({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H * factor; ++i) {
                const T* urow = &up.at(n, c, i, 0);
                T* grow = &g.at(n, c, i / factor, 0);
                for (int j = 0; j < W * factor; ++j) grow[j / factor] += urow[j];
            }
    return g;
}

// Per-(sample, channel) multipliers for spatial dropout: 0 for dropped
// channels, 1/(1-p) for survivors, 1 everywhere in off mode.
template <typename T>
std::vector<T> dropout_channel_mask(int N, int C, double p, DropoutMode mode, RngStream& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("spatial_dropout: rate must be in [0,1), got " + std::to_string(p));
    std::vector<T> mask(static_cast<size_t>(N) * C, T(1));
    if (mode == DropoutMode::off || p == 0.0) return mask;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
    return mask;
}

template <typename T>
TensorT<T> apply_channel_mask(const TensorT<T>& x, const std::vector<T>& mask) {
    const int N = x.dim(0), C = x.dim(1);
    const int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(N) * C)
        throw ShapeError("spatial_dropout: mask length does not match (N,C)");
    TensorT<T> y(x.shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T m = mask[static_cast<size_t>(n) * C + c];
            const T* src = &x.at(n, c, 0, 0);
            T* dst = &y.at(n, c, 0, 0);
            for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * m;
        }
    return y;
}

template <typename T>
TensorT<T> spatial_dropout(const TensorT<T>& x, double p, DropoutMode mode, RngStream& rng) {
    if (x.rank() != 4) throw ShapeError("spatial_dropout: expected 4-axis input");
    auto mask = dropout_channel_mask<T>(x.dim(0), x.dim(1), p, mode, rng);
    return apply_channel_mask(x, mask);
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> y(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    return y;
}

// gradient convention: 0 at x == 0
template <typename T>
TensorT<T> relu_grad(const TensorT<T>& x, const TensorT<T>& up) {
    if (!x.same_shape(up)) throw ShapeError("relu_grad: shape mismatch");
    TensorT<T> g(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) g.data[i] = x.data[i] > T(0) ? up.data[i] : T(0);
    return g;
}

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 4 || b.rank() != 4) throw ShapeError("concat_channels: expected 4-axis inputs");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    TensorT<T> y({N, Ca + Cb, a.dim(2), a.dim(3)});
    const int64_t plane = static_cast<int64_t>(a.dim(2)) * a.dim(3);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < Ca; ++c)
            std::copy_n(&a.at(n, c, 0, 0), plane, &y.at(n, c, 0, 0));
        for (int c = 0; c < Cb; ++c)
            std::copy_n(&b.at(n, c, 0, 0), plane, &y.at(n, Ca + c, 0, 0));
    }
    return y;
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> concat_channels_grad(const TensorT<T>& up, int Ca, int Cb) {
    if (up.rank() != 4 || up.dim(1) != Ca + Cb)
        throw ShapeError("concat_channels_grad: upstream channels != Ca+Cb");
    const int N = up.dim(0), H = up.dim(2), W = up.dim(3);
    TensorT<T> ga({N, Ca, H, W}), gb({N, Cb, H, W});
    const int64_t plane = static_cast<int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < Ca; ++c)
            std::copy_n(&up.at(n, c, 0, 0), plane, &ga.at(n, c, 0, 0));
        for (int c = 0; c < Cb; ++c)
            std::copy_n(&up.at(n, Ca + c, 0, 0), plane, &gb.at(n, c, 0, 0));
    }
    return {std::move(ga), std::move(gb)};
}

template <typename T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi) {
    TensorT<T> y(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = std::clamp(x.data[i], lo, hi);
    return y;
}

// gradient passes through strictly inside the bounds, zero where clamped
template <typename T>
TensorT<T> clamp_grad(const TensorT<T>& x, const TensorT<T>& up, T lo, T hi) {
    if (!x.same_shape(up)) throw ShapeError("clamp_grad: shape mismatch");
    TensorT<T> g(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i)
        g.data[i] = (x.data[i] > lo && x.data[i] < hi) ? up.data[i] : T(0);
    return g;
}

template <typename T>
bool all_finite(const TensorT<T>& x) {
    for (T v : x.data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace scib::ops
