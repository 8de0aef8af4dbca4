#include "scib/mc.hpp"

#include <algorithm>
#include <cmath>

namespace scib {

void McAccumulator::add(const Volume& y_hat, const Volume& sigma2) {
    if (y_hat.height != h_ || y_hat.width != w_ || sigma2.height != h_ || sigma2.width != w_)
        throw ShapeError("mc: sample map shape mismatch");
    y_samples_.push_back(y_hat.data);
    sigma2_samples_.push_back(sigma2.data);
}

PredictiveOutput McAccumulator::finalize(double scibilic_epsilon) const {
    const int T = static_cast<int>(y_samples_.size());
    if (T < 1) throw ConfigError("mc: at least one sample required");
    const size_t n = static_cast<size_t>(h_) * w_;

    PredictiveOutput out;
    out.samples = T;
    out.mean = Volume(h_, w_);
    out.epistemic = Volume(h_, w_);
    out.aleatoric = Volume(h_, w_);

    std::vector<double> mean(n, 0.0);
    for (int t = 0; t < T; ++t)
        for (size_t i = 0; i < n; ++i) mean[i] += y_samples_[static_cast<size_t>(t)][i];
    for (size_t i = 0; i < n; ++i) mean[i] /= T;

    // two-pass sample variance, 1/T normalization
    std::vector<double> var(n, 0.0);
    for (int t = 0; t < T; ++t)
        for (size_t i = 0; i < n; ++i) {
            const double d = y_samples_[static_cast<size_t>(t)][i] - mean[i];
            var[i] += d * d;
        }
    std::vector<double> alea(n, 0.0);
    for (int t = 0; t < T; ++t)
        for (size_t i = 0; i < n; ++i) alea[i] += sigma2_samples_[static_cast<size_t>(t)][i];

    for (size_t i = 0; i < n; ++i) {
        out.mean.data[i] = static_cast<float>(mean[i]);
        out.epistemic.data[i] = static_cast<float>(var[i] / T);
        out.aleatoric.data[i] = static_cast<float>(alea[i] / T);
    }
    out.scibilic = scibilic_map(out.epistemic, out.aleatoric, scibilic_epsilon);
    return out;
}

PredictiveOutput mc_predict(const NetworkWeights& weights, const Volume& x,
                            const McConfig& config) {
    if (config.samples < 1) throw ConfigError("mc_predict: samples must be >= 1");
    Tensor xt = x.as_tensor();
    McAccumulator acc(x.height, x.width);
    RngStream root(config.seed);
    for (int t = 0; t < config.samples; ++t) {
        RngStream sample_rng = root.child(static_cast<uint64_t>(t));
        ForwardResult out = forward(weights, xt, ForwardMode::mc_sample, sample_rng);
        Volume y = Volume::from_tensor_plane(out.y_hat);
        Volume s2(x.height, x.width);
        for (size_t i = 0; i < s2.data.size(); ++i)
            s2.data[i] = std::exp(out.log_sigma2.data[i]);
        acc.add(y, s2);
    }
    return acc.finalize(config.scibilic_epsilon);
}

Volume scibilic_map(const Volume& epistemic, const Volume& aleatoric, double epsilon) {
    if (epistemic.height != aleatoric.height || epistemic.width != aleatoric.width)
        throw ShapeError("scibilic_map: shape mismatch");
    if (epsilon <= 0.0) throw ConfigError("scibilic_map: epsilon must be > 0");
    Volume out(epistemic.height, epistemic.width);
    for (size_t i = 0; i < out.data.size(); ++i) {
        const float e = epistemic.data[i];
        const float a = aleatoric.data[i];
        if (e < 0.0f || a < 0.0f) throw DataError("scibilic_map: negative uncertainty value");
        out.data[i] = static_cast<float>(e / (a + epsilon));
    }
    return out;
}

PredictiveOutput segmented_inference(const NetworkWeights& weights, const Volume& x,
                                     const McConfig& config) {
    const int H = x.height, W = x.width;
    const int tile = config.segment_height;
    if (tile <= 0 || tile >= H) return mc_predict(weights, x, config);  // degenerate split

    const int ov = config.segment_overlap;
    if (ov < 0 || ov % 2 != 0) throw ConfigError("segmented_inference: overlap must be even and >= 0");
    if (ov >= tile) throw ConfigError("segmented_inference: overlap must be smaller than the tile");
    const int div = weights.config.divisibility();
    if (tile % div != 0)
        throw ConfigError("segmented_inference: segment_height must be divisible by " +
                          std::to_string(div));

    // tile start rows: step tile-ov, last tile flush with the bottom edge
    std::vector<int> starts;
    for (int s = 0;; s += tile - ov) {
        if (s + tile >= H) {
            starts.push_back(H - tile);
            break;
        }
        starts.push_back(s);
    }

    PredictiveOutput out;
    out.samples = config.samples;
    out.mean = Volume(H, W);
    out.epistemic = Volume(H, W);
    out.aleatoric = Volume(H, W);
    out.scibilic = Volume(H, W);

    RngStream root(config.seed);
    const int n_tiles = static_cast<int>(starts.size());
    for (int i = 0; i < n_tiles; ++i) {
        const int s = starts[static_cast<size_t>(i)];
        Volume tile_vol(tile, W);
        for (int y = 0; y < tile; ++y)
            std::copy_n(&x.data[static_cast<size_t>(s + y) * W], W,
                        &tile_vol.data[static_cast<size_t>(y) * W]);
        McConfig tc = config;
        tc.segment_height = 0;
        tc.seed = root.child("segment").child(static_cast<uint64_t>(i)).root_seed();
        PredictiveOutput part = mc_predict(weights, tile_vol, tc);

        // contribution interval in volume rows; margins are half the overlap
        int lo = i == 0 ? 0 : s + ov / 2;
        int hi = i == n_tiles - 1 ? H : starts[static_cast<size_t>(i + 1)] + ov / 2;
        for (int y = lo; y < hi; ++y) {
            const size_t src = static_cast<size_t>(y - s) * W;
            const size_t dst = static_cast<size_t>(y) * W;
            std::copy_n(&part.mean.data[src], W, &out.mean.data[dst]);
            std::copy_n(&part.epistemic.data[src], W, &out.epistemic.data[dst]);
            std::copy_n(&part.aleatoric.data[src], W, &out.aleatoric.data[dst]);
            std::copy_n(&part.scibilic.data[src], W, &out.scibilic.data[dst]);
        }
    }
    return out;
}

void export_predictive_output(const PredictiveOutput& out, const std::string& prefix) {
    const std::pair<const char*, const Volume*> maps[] = {{"mean", &out.mean},
                                                          {"epistemic", &out.epistemic},
                                                          {"aleatoric", &out.aleatoric},
                                                          {"scibilic", &out.scibilic}};
    for (const auto& [name, vol] : maps) {
        write_volume(*vol, prefix + "_" + name + ".sciv");
        write_pgm(*vol, prefix + "_" + name + ".pgm");
    }
}

}  // namespace scib
