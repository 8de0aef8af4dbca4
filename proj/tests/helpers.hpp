#pragma once

#include <functional>
#include <vector>

#include "scib/tensor.hpp"

// shared test utilities: random tensors, finite-difference gradient checks,
// and the naive direct-sum convolution oracle

namespace scib::test {

template <typename T>
TensorT<T> random_tensor(std::vector<int> shape, RngStream& rng, double lo = -1.0,
                         double hi = 1.0) {
    TensorT<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// central finite difference of a scalar-valued function wrt one buffer
template <typename T>
std::vector<double> finite_diff(const std::function<double()>& eval, std::vector<T>& buf,
                                double h) {
    std::vector<double> g(buf.size());
    for (size_t i = 0; i < buf.size(); ++i) {
        const T orig = buf[i];
        buf[i] = static_cast<T>(orig + h);
        const double up = eval();
        buf[i] = static_cast<T>(orig - h);
        const double dn = eval();
        buf[i] = orig;
        g[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

inline double rel_err(double a, double b, double floor_scale) {
    const double scale = std::max({std::abs(a), std::abs(b), floor_scale});
    return std::abs(a - b) / scale;
}

// max relative error between an analytic gradient and its FD estimate
template <typename T>
double max_rel_err(const std::vector<T>& analytic, const std::vector<double>& fd,
                   double floor_scale) {
    double worst = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, rel_err(static_cast<double>(analytic[i]), fd[i], floor_scale));
    return worst;
}

// quadruple-loop direct-sum convolution, double accumulation per output element
template <typename T>
TensorT<T> conv2d_oracle(const TensorT<T>& x, const TensorT<T>& k, const TensorT<T>& b, int stride,
                         int pad) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int F = k.dim(0), kH = k.dim(2), kW = k.dim(3);
    const int Ho = (H + 2 * pad - kH) / stride + 1;
    const int Wo = (W + 2 * pad - kW) / stride + 1;
    TensorT<T> y({N, F, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f)
            for (int yo = 0; yo < Ho; ++yo)
                for (int xo = 0; xo < Wo; ++xo) {
                    double acc = b.data[static_cast<size_t>(f)];
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < kH; ++ky)
                            for (int kx = 0; kx < kW; ++kx) {
                                const int iy = yo * stride + ky - pad;
                                const int ix = xo * stride + kx - pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += static_cast<double>(k.at(f, c, ky, kx)) *
                                       static_cast<double>(x.at(n, c, iy, ix));
                            }
                    y.at(n, f, yo, xo) = static_cast<T>(acc);
                }
    return y;
}

}  // namespace scib::test
