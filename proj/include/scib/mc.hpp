#pragma once

#include <string>
#include <vector>

#include "scib/unet.hpp"
#include "scib/volume.hpp"

namespace scib {

struct McConfig {
    int samples = 50;  // T
    uint64_t seed = 0;
    double scibilic_epsilon = 1e-6;
    int segment_overlap = 16;  // voxels, must be even
    int segment_height = 0;    // 0 = whole volume in one segment
};

struct PredictiveOutput {
    Volume mean;
    Volume epistemic;  // per-voxel sample variance of y_hat, 1/T normalization
    Volume aleatoric;  // per-voxel mean of exp(log_sigma2)
    Volume scibilic;   // epistemic / (aleatoric + epsilon)
    int samples = 0;
};

// Accumulates per-sample prediction maps and reduces them with the two-pass
// variance formula in 64-bit. Split out from mc_predict so the reduction can
// be driven with synthetic samples.
class McAccumulator {
public:
    McAccumulator(int height, int width) : h_(height), w_(width) {}
    void add(const Volume& y_hat, const Volume& sigma2);
    PredictiveOutput finalize(double scibilic_epsilon) const;

private:
    int h_, w_;
    std::vector<std::vector<float>> y_samples_;
    std::vector<std::vector<float>> sigma2_samples_;
};

// T stochastic forwards with rng streams derived as (seed, t); mean,
// epistemic (population sample variance), aleatoric and scibilic maps.
PredictiveOutput mc_predict(const NetworkWeights& weights, const Volume& x, const McConfig& config);

// Elementwise epistemic / (aleatoric + epsilon); inputs must be nonnegative.
Volume scibilic_map(const Volume& epistemic, const Volume& aleatoric, double epsilon);

// Tiled inference along the row axis for inputs taller than segment_height.
// Each tile contributes only its interior (half-overlap margins dropped,
// except at the volume borders), so every output voxel is written exactly once.
PredictiveOutput segmented_inference(const NetworkWeights& weights, const Volume& x,
                                     const McConfig& config);

// SCIV maps plus PGM previews (with .scale.txt sidecars) under prefix.
void export_predictive_output(const PredictiveOutput& out, const std::string& prefix);

}  // namespace scib
