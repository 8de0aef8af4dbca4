#include "scib/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "scib/loss.hpp"

namespace scib {

PatchBatch sample_patches(const std::vector<const DatasetEntry*>& pool, const TrainConfig& config,
                          RngStream& rng, bool* warned_small) {
    std::vector<const DatasetEntry*> eligible;
    for (const DatasetEntry* e : pool) {
        if (e->input.height >= config.patch_h && e->input.width >= config.patch_w) {
            eligible.push_back(e);
        } else if (warned_small && !*warned_small) {
            std::fprintf(stderr, "warning: volume %dx%d smaller than patch %dx%d, excluded\n",
                         e->input.height, e->input.width, config.patch_h, config.patch_w);
            *warned_small = true;
        }
    }
    if (eligible.empty()) throw DataError("sample_patches: no volume fits the patch size");

    const int B = config.batch_size, h = config.patch_h, w = config.patch_w;
    PatchBatch batch{Tensor({B, 1, h, w}), Tensor({B, 1, h, w})};
    for (int b = 0; b < B; ++b) {
        const DatasetEntry& e = *eligible[rng.uniform_index(eligible.size())];
        const int oy = static_cast<int>(rng.uniform_index(
            static_cast<uint64_t>(e.input.height - h + 1)));
        const int ox = static_cast<int>(rng.uniform_index(
            static_cast<uint64_t>(e.input.width - w + 1)));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                batch.input.at(b, 0, y, x) = e.input.at(oy + y, ox + x);
                batch.target.at(b, 0, y, x) = e.target.at(oy + y, ox + x);
            }
    }
    return batch;
}

namespace {

double validation_loss(const NetworkWeights& weights, const std::vector<const DatasetEntry*>& val) {
    RngStream unused(0);
    double total = 0.0;
    for (const DatasetEntry* e : val) {
        Tensor x = e->input.as_tensor();
        Tensor y = e->target.as_tensor();
        ForwardResult out = forward(weights, x, ForwardMode::deterministic, unused);
        total += heteroscedastic_loss(y, out.y_hat, out.log_sigma2).loss;
    }
    return total / static_cast<double>(val.size());
}

}  // namespace

TrainResult train(const NetworkWeights& init, const Dataset& dataset, const TrainConfig& config) {
    auto train_pool = dataset.split(false);
    auto val_pool = dataset.split(true);
    if (train_pool.empty()) throw DataError("train: empty training split");

    TrainResult result;
    result.weights = init;
    NetworkWeights current = init;
    OptimState state;
    RngStream root(config.seed);
    RngStream patch_rng = root.child("patches");
    RngStream drop_rng = root.child("dropout");
    bool warned_small = false;
    double best_val = std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (int step = 0; step < config.batches_per_epoch; ++step) {
            PatchBatch batch = sample_patches(train_pool, config, patch_rng, &warned_small);
            Tape tape;
            ForwardResult out = forward(current, batch.input, ForwardMode::train, drop_rng, &tape);
            auto loss = heteroscedastic_loss(batch.target, out.y_hat, out.log_sigma2);
            if (!std::isfinite(loss.loss)) {
                result.diverged = true;
                result.history.push_back({loss.loss, std::nan("")});
                return result;  // best finite checkpoint retained
            }
            epoch_loss += loss.loss;
            auto grads = tape.backward(current, loss.grad_y_hat, loss.grad_log_sigma2);
            adamw_step(current, grads, state, config.optimizer);
        }
        EpochStats stats;
        stats.train_loss = epoch_loss / config.batches_per_epoch;
        stats.val_loss = val_pool.empty() ? stats.train_loss : validation_loss(current, val_pool);
        result.history.push_back(stats);
        if (stats.val_loss < best_val) {
            best_val = stats.val_loss;
            result.weights = current;
            result.best_epoch = epoch;
        }
    }
    return result;
}

}  // namespace scib
