#include "scib/phantom.hpp"

#include <cmath>

namespace scib {

namespace {

bool inside_ellipse(double y, double x, double cy, double cx, double ry, double rx) {
    const double dy = (y - cy) / ry;
    const double dx = (x - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
}

// class geometry for one seed; returns false if any class came out empty
bool paint_classes(const PhantomSpec& spec, RngStream& rng, std::vector<uint8_t>& cls) {
    const int H = spec.height, W = spec.width;
    cls.assign(static_cast<size_t>(H) * W, 0);

    const double cy = H * rng.uniform(0.47, 0.53);
    const double cx = W * rng.uniform(0.47, 0.53);
    const double ry = H * rng.uniform(0.38, 0.44);
    const double rx = W * rng.uniform(0.36, 0.42);
    const double skull_frac = 0.86;

    // tissue-B: an off-center lobe; ventricle: a small central blob
    const double bcy = cy - ry * rng.uniform(0.25, 0.45);
    const double bcx = cx + rx * rng.uniform(-0.2, 0.2);
    const double bry = ry * rng.uniform(0.22, 0.32);
    const double brx = rx * rng.uniform(0.30, 0.45);
    const double vcy = cy + ry * rng.uniform(0.05, 0.2);
    const double vcx = cx + rx * rng.uniform(-0.08, 0.08);
    const double vry = ry * rng.uniform(0.10, 0.16);
    const double vrx = rx * rng.uniform(0.14, 0.22);

    size_t counts[5] = {0, 0, 0, 0, 0};
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            uint8_t c = 0;
            if (inside_ellipse(y, x, cy, cx, ry, rx)) {
                if (!inside_ellipse(y, x, cy, cx, ry * skull_frac, rx * skull_frac))
                    c = static_cast<uint8_t>(TissueClass::skull);
                else if (inside_ellipse(y, x, vcy, vcx, vry, vrx))
                    c = static_cast<uint8_t>(TissueClass::ventricle);
                else if (inside_ellipse(y, x, bcy, bcx, bry, brx))
                    c = static_cast<uint8_t>(TissueClass::tissue_b);
                else
                    c = static_cast<uint8_t>(TissueClass::tissue_a);
            }
            cls[static_cast<size_t>(y) * W + x] = c;
            ++counts[c];
        }
    }
    for (int c = 0; c < 5; ++c)
        if (counts[c] == 0) return false;
    return true;
}

}  // namespace

PhantomPair generate_phantom_pair(const PhantomSpec& spec, RngStream& rng) {
    const int H = spec.height, W = spec.width;
    if (H <= 0 || W <= 0) throw ConfigError("phantom: size must be positive");

    std::vector<uint8_t> cls;
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_retries && !ok; ++attempt) {
        RngStream geo = rng.child("geometry").child(static_cast<uint64_t>(attempt));
        ok = paint_classes(spec, geo, cls);
    }
    if (!ok) throw DataError("phantom: degenerate geometry after retries");

    PhantomPair p;
    p.input = Volume(H, W);
    p.target = Volume(H, W);
    p.foreground = Volume(H, W);
    p.band_mask = Volume(H, W);
    p.tissue_mask = Volume(H, W);
    p.class_map = cls;
    p.input.seed = p.target.seed = rng.root_seed();

    const int band_y0 = static_cast<int>(spec.band_lo * H);
    const int band_y1 = static_cast<int>(spec.band_hi * H);
    RngStream noise_in = rng.child("noise-input");
    RngStream noise_tg = rng.child("noise-target");

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const size_t i = static_cast<size_t>(y) * W + x;
            const uint8_t c = cls[i];
            const bool in_band = c == static_cast<uint8_t>(TissueClass::tissue_a) &&
                                 y >= band_y0 && y < band_y1;
            float tstd = spec.target_noise_std;
            if (in_band) tstd *= spec.band_noise_multiplier;
            p.input.data[i] = spec.input_levels[c] +
                              spec.input_noise_std * static_cast<float>(noise_in.normal());
            p.target.data[i] =
                spec.target_levels[c] + tstd * static_cast<float>(noise_tg.normal());
            p.foreground.data[i] = c != 0 ? 1.0f : 0.0f;
            p.band_mask.data[i] = in_band ? 1.0f : 0.0f;
            p.tissue_mask.data[i] = c == static_cast<uint8_t>(TissueClass::tissue_a) ? 1.0f : 0.0f;
        }
    }
    return p;
}

Volume normalize_tissue_mean(const Volume& v, const Volume& tissue_mask, double* divisor_out) {
    if (v.height != tissue_mask.height || v.width != tissue_mask.width)
        throw ShapeError("normalize_tissue_mean: mask shape mismatch");
    double sum = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < v.numel(); ++i) {
        if (tissue_mask.data[static_cast<size_t>(i)] != 0.0f) {
            sum += v.data[static_cast<size_t>(i)];
            ++count;
        }
    }
    if (count == 0) throw DataError("normalize_tissue_mean: empty tissue mask");
    const double mean = sum / static_cast<double>(count);
    if (std::abs(mean) < 1e-8) throw DataError("normalize_tissue_mean: tissue mean is near zero");
    Volume out = v;
    for (auto& x : out.data) x = static_cast<float>(x / mean);
    if (divisor_out) *divisor_out = mean;
    return out;
}

Dataset build_dataset(int n_train, int n_val, const PhantomSpec& spec, uint64_t seed) {
    if (n_train < 1 || n_val < 1) throw ConfigError("build_dataset: counts must be >= 1");
    Dataset ds;
    RngStream root(seed);
    for (int i = 0; i < n_train + n_val; ++i) {
        RngStream vr = root.child("phantom").child(static_cast<uint64_t>(i));
        PhantomPair p = generate_phantom_pair(spec, vr);
        DatasetEntry e;
        e.input = normalize_tissue_mean(p.input, p.tissue_mask, &e.input_divisor);
        e.target = normalize_tissue_mean(p.target, p.tissue_mask, &e.target_divisor);
        e.foreground = std::move(p.foreground);
        e.band_mask = std::move(p.band_mask);
        e.tissue_mask = std::move(p.tissue_mask);
        e.seed_index = static_cast<uint64_t>(i);
        e.is_validation = i >= n_train;
        ds.entries.push_back(std::move(e));
    }
    return ds;
}

}  // namespace scib
