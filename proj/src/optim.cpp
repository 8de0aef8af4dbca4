#include "scib/optim.hpp"

#include <cmath>

namespace scib {

void adamw_step(NetworkWeights& weights, const std::map<std::string, Tensor>& grads,
                OptimState& state, const AdamWConfig& config) {
    for (const auto& [name, g] : grads) {
        const Tensor& w = weights.at(name);
        if (!w.same_shape(g))
            throw ShapeError("adamw: gradient shape " + shape_str(g.shape) +
                             " != parameter shape " + shape_str(w.shape) + " for " + name);
        for (float v : g.data)
            if (!std::isfinite(v))
                throw NumericError("adamw: non-finite gradient for " + name + ", step rejected");
    }

    const int64_t t = state.step + 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
    for (const auto& [name, g] : grads) {
        Tensor& w = weights.at(name);
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(g.data.size(), 0.0);
        if (v.empty()) v.assign(g.data.size(), 0.0);
        for (size_t i = 0; i < g.data.size(); ++i) {
            const double gi = g.data[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            const double wi = w.data[i];
            w.data[i] = static_cast<float>(
                wi - config.learning_rate *
                         (mhat / (std::sqrt(vhat) + config.epsilon) + config.weight_decay * wi));
        }
    }
    state.step = t;
}

}  // namespace scib
