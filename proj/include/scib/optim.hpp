#pragma once

#include <map>
#include <string>
#include <vector>

#include "scib/tensor.hpp"
#include "scib/unet.hpp"

namespace scib {

struct AdamWConfig {
    double learning_rate = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 1e-6;
    double epsilon = 1e-8;
};

// First/second moment accumulators, kept in 64-bit per parameter.
struct OptimState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    int64_t step = 0;
};

// Decoupled-decay Adam step:
//   m <- b1*m + (1-b1)*g,  v <- b2*v + (1-b2)*g^2
//   w <- w - lr * ( mhat / (sqrt(vhat) + eps) + wd * w )
// A non-finite gradient rejects the whole step; weights and state are
// left untouched.
void adamw_step(NetworkWeights& weights, const std::map<std::string, Tensor>& grads,
                OptimState& state, const AdamWConfig& config);

}  // namespace scib
