#pragma once

#include <vector>

#include "scib/optim.hpp"
#include "scib/phantom.hpp"
#include "scib/unet.hpp"

namespace scib {

struct TrainConfig {
    AdamWConfig optimizer;  // lr 0.003, betas (0.9, 0.99), weight decay 1e-6
    int batch_size = 16;
    int epochs = 30;
    int batches_per_epoch = 64;  // an epoch is a fixed count of random batches
    int patch_h = 32;
    int patch_w = 32;
    uint64_t seed = 0;
};

struct PatchBatch {
    Tensor input;   // [B, 1, h, w]
    Tensor target;  // [B, 1, h, w]
};

// Uniform random valid offsets over uniformly chosen eligible volumes;
// input and target patches are co-located. Volumes smaller than the patch
// are skipped (warned once via warned_small, may be null).
PatchBatch sample_patches(const std::vector<const DatasetEntry*>& pool, const TrainConfig& config,
                          RngStream& rng, bool* warned_small = nullptr);

struct EpochStats {
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    NetworkWeights weights;  // best validation loss
    std::vector<EpochStats> history;
    bool diverged = false;
    int best_epoch = -1;
};

// Minimizes the heteroscedastic loss with AdamW over random patch batches.
// Validation loss is computed with dropout off on the full validation
// volumes. On divergence (non-finite loss) training stops and the best
// weights so far are returned with diverged = true.
TrainResult train(const NetworkWeights& init, const Dataset& dataset, const TrainConfig& config);

}  // namespace scib
