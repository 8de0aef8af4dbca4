#pragma once

#include <cmath>

#include "scib/tensor.hpp"

namespace scib {

template <typename T>
struct HeteroscedasticLoss {
    double loss = 0.0;
    TensorT<T> grad_y_hat;
    TensorT<T> grad_log_sigma2;
};

// Gaussian negative log-likelihood with per-element log-variance s:
//   L = (1/M) sum( 0.5 * exp(-s) * (y - y_hat)^2 + 0.5 * s )
// with the exact analytic partials
//   dL/dy_hat = -exp(-s) * (y - y_hat) / M
//   dL/ds     = 0.5 * (1 - exp(-s) * (y - y_hat)^2) / M
template <typename T>
HeteroscedasticLoss<T> heteroscedastic_loss(const TensorT<T>& y, const TensorT<T>& y_hat,
                                            const TensorT<T>& log_sigma2) {
    if (!y.same_shape(y_hat) || !y.same_shape(log_sigma2))
        throw ShapeError("heteroscedastic_loss: shapes differ: y " + shape_str(y.shape) +
                         ", y_hat " + shape_str(y_hat.shape) + ", log_sigma2 " +
                         shape_str(log_sigma2.shape));
    const double M = static_cast<double>(y.numel());
    HeteroscedasticLoss<T> out;
    out.grad_y_hat = TensorT<T>(y.shape);
    out.grad_log_sigma2 = TensorT<T>(y.shape);
    double acc = 0.0;
    for (size_t i = 0; i < y.data.size(); ++i) {
        const double s = log_sigma2.data[i];
        const double r = static_cast<double>(y.data[i]) - static_cast<double>(y_hat.data[i]);
        const double inv_var = std::exp(-s);
        acc += 0.5 * inv_var * r * r + 0.5 * s;
        out.grad_y_hat.data[i] = static_cast<T>(-inv_var * r / M);
        out.grad_log_sigma2.data[i] = static_cast<T>(0.5 * (1.0 - inv_var * r * r) / M);
    }
    out.loss = acc / M;
    return out;
}

}  // namespace scib
