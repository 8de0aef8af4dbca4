#include "scib/unet.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace scib {

using ops::DropoutMode;

Tensor& NetworkWeights::at(const std::string& name) {
    for (auto& [n, t] : params)
        if (n == name) return t;
    throw DataError("weights: no parameter named " + name);
}

const Tensor& NetworkWeights::at(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    throw DataError("weights: no parameter named " + name);
}

int64_t NetworkWeights::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

namespace {

void add_conv_param(NetworkWeights& w, const std::string& name, int out_ch, int in_ch, int k,
                    RngStream& rng) {
    Tensor kernel({out_ch, in_ch, k, k});
    RngStream r = rng.child(name);
    const double std = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
    for (auto& v : kernel.data) v = static_cast<float>(std * r.normal());
    w.params.emplace_back(name + ".w", std::move(kernel));
    w.params.emplace_back(name + ".b", Tensor({out_ch}));
}

}  // namespace

NetworkWeights build_model(const UNetConfig& config, RngStream& rng) {
    if (config.levels < 1 || config.base_channels < 1 || config.input_channels < 1)
        throw ConfigError("unet: levels, base_channels and input_channels must be >= 1");
    if (config.dropout_rate < 0.0 || config.dropout_rate >= 1.0)
        throw ConfigError("unet: dropout_rate must be in [0,1)");

    NetworkWeights w;
    w.config = config;
    for (int l = 0; l < config.levels; ++l) {
        const int ch = config.channels_at(l);
        const int in_ch = l == 0 ? config.input_channels : ch;
        const std::string p = "enc" + std::to_string(l);
        add_conv_param(w, p + ".conv1", ch, in_ch, 3, rng);
        add_conv_param(w, p + ".conv2", ch, ch, 3, rng);
        add_conv_param(w, p + ".down", config.channels_at(l + 1), ch, 3, rng);
    }
    const int bc = config.bottleneck_channels();
    add_conv_param(w, "bottleneck.conv1", bc, bc, 3, rng);
    add_conv_param(w, "bottleneck.conv2", bc, bc, 3, rng);
    for (int l = config.levels - 1; l >= 0; --l) {
        const int ch = config.channels_at(l);
        const std::string p = "dec" + std::to_string(l);
        add_conv_param(w, p + ".up", ch, config.channels_at(l + 1), 5, rng);
        add_conv_param(w, p + ".conv1", ch, 2 * ch, 3, rng);
        add_conv_param(w, p + ".conv2", ch, ch, 3, rng);
    }
    const int head_in = config.base_channels + config.input_channels;
    add_conv_param(w, "head_mean.conv1", config.base_channels, head_in, 3, rng);
    add_conv_param(w, "head_mean.conv2", 1, config.base_channels, 1, rng);
    add_conv_param(w, "head_logvar.conv1", config.base_channels, head_in, 3, rng);
    add_conv_param(w, "head_logvar.conv2", 1, config.base_channels, 1, rng);
    return w;
}

namespace {

constexpr float kLogVarLo = -10.0f;
constexpr float kLogVarHi = 10.0f;

// forward-pass builder over the tape
struct Net {
    const NetworkWeights& w;
    ForwardMode mode;
    RngStream& rng;
    std::vector<Tape::Node> nodes;
    std::vector<Tensor> vals;

    int push(Tape::Node n, Tensor v) {
        nodes.push_back(std::move(n));
        vals.push_back(std::move(v));
        return static_cast<int>(vals.size()) - 1;
    }

    int input(Tensor x) {
        return push({.kind = Tape::Node::Kind::input}, std::move(x));
    }

    int conv(int x, const std::string& param, int stride, int pad) {
        Tensor y = ops::conv2d(vals[static_cast<size_t>(x)], w.at(param + ".w"),
                               w.at(param + ".b"), stride, pad);
        if (!ops::all_finite(y))
            throw NumericError("unet: non-finite activation after layer " + param);
        return push({.kind = Tape::Node::Kind::conv, .in_a = x, .param = param, .stride = stride,
                     .pad = pad},
                    std::move(y));
    }

    int relu(int x) {
        return push({.kind = Tape::Node::Kind::relu, .in_a = x},
                    ops::relu(vals[static_cast<size_t>(x)]));
    }

    int dropout(int x) {
        const Tensor& in = vals[static_cast<size_t>(x)];
        const DropoutMode dm =
            mode == ForwardMode::deterministic ? DropoutMode::off : DropoutMode::train;
        auto mask = ops::dropout_channel_mask<float>(in.dim(0), in.dim(1), w.config.dropout_rate,
                                                     dm, rng);
        Tensor y = ops::apply_channel_mask(in, mask);
        return push({.kind = Tape::Node::Kind::dropout, .in_a = x, .mask = std::move(mask)},
                    std::move(y));
    }

    // conv + relu + dropout, the standard block outside the heads
    int block(int x, const std::string& param, int stride = 1, int pad = 1) {
        return dropout(relu(conv(x, param, stride, pad)));
    }

    int upsample(int x, int factor) {
        return push({.kind = Tape::Node::Kind::upsample, .in_a = x, .factor = factor},
                    ops::nearest_upsample(vals[static_cast<size_t>(x)], factor));
    }

    int concat(int a, int b) {
        return push({.kind = Tape::Node::Kind::concat, .in_a = a, .in_b = b},
                    ops::concat_channels(vals[static_cast<size_t>(a)],
                                         vals[static_cast<size_t>(b)]));
    }

    int clamp(int x, float lo, float hi) {
        return push({.kind = Tape::Node::Kind::clamp, .in_a = x, .lo = lo, .hi = hi},
                    ops::clamp(vals[static_cast<size_t>(x)], lo, hi));
    }
};

}  // namespace

ForwardResult forward(const NetworkWeights& weights, const Tensor& x, ForwardMode mode,
                      RngStream& rng, Tape* tape) {
    const UNetConfig& cfg = weights.config;
    if (x.rank() != 4 || x.dim(1) != cfg.input_channels)
        throw ShapeError("unet: expected input [N," + std::to_string(cfg.input_channels) +
                         ",H,W], got " + shape_str(x.shape));
    const int div = cfg.divisibility();
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
        throw ShapeError("unet: spatial extents " + std::to_string(x.dim(2)) + "x" +
                         std::to_string(x.dim(3)) + " must be divisible by " + std::to_string(div));

    Net net{weights, mode, rng};
    const int x_id = net.input(x);
    int cur = x_id;
    std::vector<int> skips;
    for (int l = 0; l < cfg.levels; ++l) {
        const std::string p = "enc" + std::to_string(l);
        cur = net.block(cur, p + ".conv1");
        cur = net.block(cur, p + ".conv2");
        skips.push_back(cur);
        cur = net.block(cur, p + ".down", 2, 1);
    }
    cur = net.block(cur, "bottleneck.conv1");
    cur = net.block(cur, "bottleneck.conv2");
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const std::string p = "dec" + std::to_string(l);
        cur = net.upsample(cur, 2);
        cur = net.block(cur, p + ".up", 1, 2);
        cur = net.concat(cur, skips[static_cast<size_t>(l)]);
        cur = net.block(cur, p + ".conv1");
        cur = net.block(cur, p + ".conv2");
    }
    cur = net.concat(cur, x_id);

    // heads: no dropout
    const int mean_out = net.conv(net.relu(net.conv(cur, "head_mean.conv1", 1, 1)),
                                  "head_mean.conv2", 1, 0);
    const int logvar_raw = net.conv(net.relu(net.conv(cur, "head_logvar.conv1", 1, 1)),
                                    "head_logvar.conv2", 1, 0);
    const int logvar_out = net.clamp(logvar_raw, kLogVarLo, kLogVarHi);

    ForwardResult out{net.vals[static_cast<size_t>(mean_out)],
                      net.vals[static_cast<size_t>(logvar_out)]};
    if (tape) {
        tape->nodes_ = std::move(net.nodes);
        tape->vals_ = std::move(net.vals);
        tape->out_mean_ = mean_out;
        tape->out_logvar_ = logvar_out;
    }
    return out;
}

namespace {

void accumulate(Tensor& dst, const Tensor& src) {
    if (dst.data.empty()) {
        dst = src;
        return;
    }
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

std::map<std::string, Tensor> Tape::backward(const NetworkWeights& weights, const Tensor& g_y_hat,
                                             const Tensor& g_log_sigma2) {
    if (out_mean_ < 0) throw DataError("tape: backward called before forward");
    std::vector<Tensor> grads(vals_.size());
    grads[static_cast<size_t>(out_mean_)] = g_y_hat;
    accumulate(grads[static_cast<size_t>(out_logvar_)], g_log_sigma2);

    std::map<std::string, Tensor> pgrads;
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
        Tensor& g = grads[static_cast<size_t>(id)];
        if (g.data.empty()) continue;  // unreachable from the outputs
        const Node& node = nodes_[static_cast<size_t>(id)];
        switch (node.kind) {
            case Node::Kind::input:
                break;
            case Node::Kind::conv: {
                const Tensor& in = vals_[static_cast<size_t>(node.in_a)];
                auto cg = ops::conv2d_grad(in, weights.at(node.param + ".w"),
                                           weights.at(node.param + ".b"), g, node.stride, node.pad);
                accumulate(pgrads[node.param + ".w"], cg.kernel);
                accumulate(pgrads[node.param + ".b"], cg.bias);
                accumulate(grads[static_cast<size_t>(node.in_a)], cg.input);
                break;
            }
            case Node::Kind::relu:
                accumulate(grads[static_cast<size_t>(node.in_a)],
                           ops::relu_grad(vals_[static_cast<size_t>(node.in_a)], g));
                break;
            case Node::Kind::dropout:
                accumulate(grads[static_cast<size_t>(node.in_a)],
                           ops::apply_channel_mask(g, node.mask));
                break;
            case Node::Kind::upsample: {
                const Tensor& in = vals_[static_cast<size_t>(node.in_a)];
                accumulate(grads[static_cast<size_t>(node.in_a)],
                           ops::nearest_upsample_grad(g, node.factor, in.dim(2), in.dim(3)));
                break;
            }
            case Node::Kind::concat: {
                const int Ca = vals_[static_cast<size_t>(node.in_a)].dim(1);
                const int Cb = vals_[static_cast<size_t>(node.in_b)].dim(1);
                auto [ga, gb] = ops::concat_channels_grad(g, Ca, Cb);
                accumulate(grads[static_cast<size_t>(node.in_a)], ga);
                accumulate(grads[static_cast<size_t>(node.in_b)], gb);
                break;
            }
            case Node::Kind::clamp:
                accumulate(grads[static_cast<size_t>(node.in_a)],
                           ops::clamp_grad(vals_[static_cast<size_t>(node.in_a)], g, node.lo,
                                           node.hi));
                break;
        }
        g = Tensor();  // free as we go
    }
    return pgrads;
}

void save_checkpoint(const NetworkWeights& weights, const std::string& path) {
    nlohmann::json manifest;
    manifest["config"] = {{"levels", weights.config.levels},
                          {"base_channels", weights.config.base_channels},
                          {"dropout_rate", weights.config.dropout_rate},
                          {"input_channels", weights.config.input_channels}};
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& [name, t] : weights.params)
        plist.push_back({{"name", name}, {"shape", t.shape}});
    manifest["params"] = plist;
    const std::string mtext = manifest.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open for write: " + path);
    os.write("SCIBCKP1", 8);
    const uint32_t mlen = static_cast<uint32_t>(mtext.size());
    os.write(reinterpret_cast<const char*>(&mlen), 4);
    os.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& [name, t] : weights.params)
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!os) throw DataError("checkpoint: write failed: " + path);
}

NetworkWeights load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "SCIBCKP1", 8) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    uint32_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), 4);
    std::string mtext(mlen, '\0');
    is.read(mtext.data(), mlen);
    if (!is) throw DataError("checkpoint: truncated manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: malformed manifest in " + path + ": " + e.what());
    }
    NetworkWeights w;
    w.config.levels = manifest.at("config").at("levels").get<int>();
    w.config.base_channels = manifest.at("config").at("base_channels").get<int>();
    w.config.dropout_rate = manifest.at("config").at("dropout_rate").get<double>();
    w.config.input_channels = manifest.at("config").at("input_channels").get<int>();
    for (const auto& p : manifest.at("params")) {
        Tensor t(p.at("shape").get<std::vector<int>>());
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (is.gcount() != static_cast<std::streamsize>(t.data.size() * sizeof(float)))
            throw DataError("checkpoint: truncated payload for " + p.at("name").get<std::string>() +
                            " in " + path);
        w.params.emplace_back(p.at("name").get<std::string>(), std::move(t));
    }
    return w;
}

}  // namespace scib
