#pragma once

#include <string>
#include <vector>

#include "scib/tensor.hpp"
#include "scib/volume.hpp"

namespace scib {

// Procedural paired-phantom generator. The input image plays the CT role,
// the target plays the MR role; tissue classes map input intensity to target
// intensity injectively so the translation task is learnable.
struct PhantomSpec {
    int height = 64;
    int width = 64;

    // per-class intensity tables: {background, skull, tissue_a, tissue_b, ventricle}
    float input_levels[5] = {0.0f, 1.0f, 0.35f, 0.55f, 0.15f};
    float target_levels[5] = {0.0f, 0.12f, 0.70f, 0.45f, 0.95f};

    float input_noise_std = 0.01f;
    float target_noise_std = 0.04f;
    float band_noise_multiplier = 4.0f;  // elevated target noise inside the band

    // heteroscedastic band: rows [band_lo*H, band_hi*H) restricted to tissue-A
    float band_lo = 0.55f;
    float band_hi = 0.80f;

    int max_retries = 16;
};

enum class TissueClass : uint8_t { background = 0, skull = 1, tissue_a = 2, tissue_b = 3, ventricle = 4 };

struct PhantomPair {
    Volume input;
    Volume target;
    Volume foreground;   // binary, all non-background voxels
    Volume band_mask;    // binary, elevated-noise region
    Volume tissue_mask;  // binary, tissue-A voxels (normalization reference)
    std::vector<uint8_t> class_map;
};

PhantomPair generate_phantom_pair(const PhantomSpec& spec, RngStream& rng);

// Divide by the mean over the mask; output mean over the mask becomes 1.
// Returns the normalized volume; divisor_out (optional) receives the mean.
Volume normalize_tissue_mean(const Volume& v, const Volume& tissue_mask, double* divisor_out = nullptr);

struct DatasetEntry {
    Volume input;    // tissue-mean normalized
    Volume target;   // tissue-mean normalized
    Volume foreground;
    Volume band_mask;
    Volume tissue_mask;
    double input_divisor = 1.0;
    double target_divisor = 1.0;
    uint64_t seed_index = 0;
    bool is_validation = false;
};

struct Dataset {
    std::vector<DatasetEntry> entries;

    std::vector<const DatasetEntry*> split(bool validation) const {
        std::vector<const DatasetEntry*> out;
        for (const auto& e : entries)
            if (e.is_validation == validation) out.push_back(&e);
        return out;
    }
};

// Per-volume seeds derived as (seed, index); indices 0..n_train-1 are the
// training split, n_train..n_train+n_val-1 validation.
Dataset build_dataset(int n_train, int n_val, const PhantomSpec& spec, uint64_t seed);

}  // namespace scib
