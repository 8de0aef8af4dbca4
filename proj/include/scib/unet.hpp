#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "scib/ops.hpp"
#include "scib/tensor.hpp"

namespace scib {

struct UNetConfig {
    int levels = 3;
    int base_channels = 16;
    double dropout_rate = 0.2;
    int input_channels = 1;

    // channel count entering level l (0 = input side)
    int channels_at(int level) const { return base_channels << level; }
    int bottleneck_channels() const { return base_channels << levels; }
    int divisibility() const { return 1 << levels; }
};

enum class ForwardMode { train, mc_sample, deterministic };

struct NetworkWeights {
    UNetConfig config;
    std::vector<std::pair<std::string, Tensor>> params;  // stable order

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    int64_t parameter_count() const;
};

NetworkWeights build_model(const UNetConfig& config, RngStream& rng);

struct ForwardResult {
    Tensor y_hat;
    Tensor log_sigma2;  // clamped to [-10, 10]
};

// Activation tape recorded during forward, consumed once by backward to
// produce per-parameter gradients.
class Tape {
public:
    std::map<std::string, Tensor> backward(const NetworkWeights& weights, const Tensor& g_y_hat,
                                           const Tensor& g_log_sigma2);

    // populated by forward(); treat as opaque
    struct Node {
        enum class Kind { input, conv, relu, dropout, upsample, concat, clamp } kind;
        int in_a = -1;
        int in_b = -1;
        std::string param;  // conv: weight name prefix
        int stride = 1, pad = 0, factor = 1;
        std::vector<float> mask;  // dropout channel multipliers
        float lo = 0, hi = 0;
    };
    std::vector<Node> nodes_;
    std::vector<Tensor> vals_;
    int out_mean_ = -1;
    int out_logvar_ = -1;
};

// Runs the network. H and W must be divisible by 2^levels. In deterministic
// mode dropout is disabled and the result is a pure function of (weights, x).
ForwardResult forward(const NetworkWeights& weights, const Tensor& x, ForwardMode mode,
                      RngStream& rng, Tape* tape = nullptr);

// Checkpoint container: magic "SCIBCKP1", u32 LE manifest length, JSON
// manifest (config echo + ordered name/shape list), then each parameter's
// raw little-endian float32 payload back to back.
void save_checkpoint(const NetworkWeights& weights, const std::string& path);
NetworkWeights load_checkpoint(const std::string& path);

}  // namespace scib
