#include "scib/mc.hpp"

#include <cmath>

#include "doctest.h"
#include "helpers.hpp"

using namespace scib;
using namespace scib::test;

namespace {

NetworkWeights small_model(double dropout = 0.2) {
    UNetConfig cfg;
    cfg.levels = 2;
    cfg.base_channels = 4;
    cfg.dropout_rate = dropout;
    RngStream r(321);
    return build_model(cfg, r);
}

Volume random_volume(int h, int w, uint64_t seed) {
    Volume v(h, w);
    RngStream r(seed);
    for (auto& x : v.data) x = static_cast<float>(r.uniform(0.0, 1.0));
    return v;
}

}  // namespace

TEST_CASE("mc accumulator hand case: samples (1,3) with sigma2 (2,4)") {
    McAccumulator acc(1, 1);
    Volume y1(1, 1), y2(1, 1), s1(1, 1), s2(1, 1);
    y1.data[0] = 1.0f;
    y2.data[0] = 3.0f;
    s1.data[0] = 2.0f;
    s2.data[0] = 4.0f;
    acc.add(y1, s1);
    acc.add(y2, s2);
    PredictiveOutput out = acc.finalize(1e-6);
    CHECK(out.mean.data[0] == 2.0f);
    CHECK(out.epistemic.data[0] == 1.0f);  // (1+9)/2 - 4, exact in 64-bit
    CHECK(out.aleatoric.data[0] == 3.0f);
    CHECK(out.scibilic.data[0] == doctest::Approx(1.0 / (3.0 + 1e-6)).epsilon(1e-6));
}

TEST_CASE("mc_predict single sample and zero-dropout degeneracies") {
    Volume x = random_volume(8, 8, 1);
    SUBCASE("T = 1: epistemic identically zero, aleatoric equals the lone map") {
        NetworkWeights w = small_model();
        McConfig cfg;
        cfg.samples = 1;
        cfg.seed = 5;
        PredictiveOutput out = mc_predict(w, x, cfg);
        CHECK(out.samples == 1);
        for (float v : out.epistemic.data) CHECK(v == 0.0f);
        // reproduce the single stochastic forward by hand
        RngStream sr = RngStream(5).child(static_cast<uint64_t>(0));
        ForwardResult f = forward(w, x.as_tensor(), ForwardMode::mc_sample, sr);
        for (size_t i = 0; i < out.aleatoric.data.size(); ++i)
            CHECK(out.aleatoric.data[i] ==
                  doctest::Approx(std::exp(f.log_sigma2.data[i])).epsilon(1e-6));
    }
    SUBCASE("dropout 0: epistemic <= 1e-12 everywhere at T = 50") {
        NetworkWeights w = small_model(0.0);
        McConfig cfg;
        cfg.samples = 50;
        cfg.seed = 5;
        PredictiveOutput out = mc_predict(w, x, cfg);
        for (float v : out.epistemic.data) CHECK(v <= 1e-12f);
    }
    SUBCASE("T = 0 rejected") {
        NetworkWeights w = small_model();
        McConfig cfg;
        cfg.samples = 0;
        CHECK_THROWS_AS(mc_predict(w, x, cfg), ConfigError);
    }
}

TEST_CASE("mc_predict reproducibility and map contracts") {
    NetworkWeights w = small_model();
    Volume x = random_volume(8, 8, 2);
    McConfig cfg;
    cfg.samples = 8;
    cfg.seed = 99;
    PredictiveOutput a = mc_predict(w, x, cfg);
    PredictiveOutput b = mc_predict(w, x, cfg);
    CHECK(a.mean.data == b.mean.data);
    CHECK(a.epistemic.data == b.epistemic.data);
    CHECK(a.aleatoric.data == b.aleatoric.data);
    CHECK(a.scibilic.data == b.scibilic.data);
    for (size_t i = 0; i < a.epistemic.data.size(); ++i) {
        CHECK(a.epistemic.data[i] >= 0.0f);
        CHECK(a.aleatoric.data[i] >= std::exp(-10.0f));  // clamp floor
        CHECK(a.aleatoric.data[i] <= std::exp(10.0f));
    }
}

TEST_CASE("epistemic estimator agrees with a direct two-pass reference") {
    // randomized synthetic samples through the accumulator vs an independent
    // long-double reference of the 1/T population variance
    RngStream rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        RngStream r = rng.child(static_cast<uint64_t>(trial));
        const int T = 2 + static_cast<int>(r.uniform_index(20));
        McAccumulator acc(2, 2);
        std::vector<std::vector<float>> samples;
        for (int t = 0; t < T; ++t) {
            Volume y(2, 2), s(2, 2);
            for (auto& v : y.data) v = static_cast<float>(r.uniform(-100.0, 100.0) + 1e4);
            for (auto& v : s.data) v = static_cast<float>(r.uniform(0.1, 1.0));
            samples.push_back(y.data);
            acc.add(y, s);
        }
        PredictiveOutput out = acc.finalize(1e-6);
        for (int i = 0; i < 4; ++i) {
            long double mean = 0.0L;
            for (const auto& sm : samples) mean += sm[static_cast<size_t>(i)];
            mean /= T;
            long double var = 0.0L;
            for (const auto& sm : samples) {
                const long double d = sm[static_cast<size_t>(i)] - mean;
                var += d * d;
            }
            var /= T;
            // offset +1e4 makes the one-pass form cancel catastrophically;
            // the two-pass implementation must stay accurate
            CHECK(rel_err(out.epistemic.data[static_cast<size_t>(i)],
                          static_cast<double>(var), 1e-9) < 1e-6);
        }
    }
}

TEST_CASE("scibilic_map") {
    SUBCASE("zero numerator gives zero") {
        Volume e(2, 2), a(2, 2);
        for (auto& v : a.data) v = 0.7f;
        Volume s = scibilic_map(e, a, 1e-6);
        for (float v : s.data) CHECK(v == 0.0f);
    }
    SUBCASE("identity ratio with test-only epsilon ~ 0") {
        Volume e(2, 2), a(2, 2);
        for (auto& v : e.data) v = 1.0f;
        for (auto& v : a.data) v = 1.0f;
        Volume s = scibilic_map(e, a, 1e-30);
        for (float v : s.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("epsilon floors the zero-aleatoric quotient") {
        Volume e(1, 1), a(1, 1);
        e.data[0] = 2.0f;
        Volume s = scibilic_map(e, a, 1e-6);
        CHECK(s.data[0] == doctest::Approx(2e6).epsilon(1e-4));
    }
    SUBCASE("negative inputs rejected, same maps in same map out") {
        Volume e(1, 1), a(1, 1);
        e.data[0] = -1.0f;
        CHECK_THROWS_AS(scibilic_map(e, a, 1e-6), DataError);
        Volume e2(3, 3), a2(3, 3);
        RngStream r(1);
        for (auto& v : e2.data) v = static_cast<float>(r.uniform(0, 1));
        for (auto& v : a2.data) v = static_cast<float>(r.uniform(0, 1));
        CHECK(scibilic_map(e2, a2, 1e-6).data == scibilic_map(e2, a2, 1e-6).data);
    }
}

TEST_CASE("segmented_inference") {
    NetworkWeights w = small_model(0.0);  // deterministic network
    Volume x = random_volume(16, 8, 3);

    SUBCASE("single whole-volume segment is bit-identical to mc_predict") {
        McConfig cfg;
        cfg.samples = 2;
        cfg.seed = 4;
        cfg.segment_height = 16;  // covers the full volume
        cfg.segment_overlap = 4;
        PredictiveOutput seg = segmented_inference(w, x, cfg);
        PredictiveOutput full = mc_predict(w, x, cfg);
        CHECK(seg.mean.data == full.mean.data);
        CHECK(seg.epistemic.data == full.epistemic.data);
        CHECK(seg.scibilic.data == full.scibilic.data);
    }
    SUBCASE("deterministic stitched mean equals full-volume inference") {
        // 1-level net: receptive-field radius ~13 (nearest-upsample alignment
        // makes it asymmetric), overlap 32 leaves a 16-row margin per side so
        // every contributed voxel sees its whole receptive field inside its tile
        UNetConfig cfg1;
        cfg1.levels = 1;
        cfg1.base_channels = 4;
        cfg1.dropout_rate = 0.0;
        RngStream br(11);
        NetworkWeights shallow = build_model(cfg1, br);
        Volume tall = random_volume(64, 8, 9);
        McConfig cfg;
        cfg.samples = 1;
        cfg.seed = 4;
        cfg.segment_height = 48;
        cfg.segment_overlap = 32;
        PredictiveOutput seg = segmented_inference(shallow, tall, cfg);
        PredictiveOutput full = mc_predict(shallow, tall, cfg);
        for (size_t i = 0; i < seg.mean.data.size(); ++i) {
            CHECK(std::abs(seg.mean.data[i] - full.mean.data[i]) < 1e-5f);
            CHECK(std::abs(seg.aleatoric.data[i] - full.aleatoric.data[i]) < 1e-5f);
        }
    }
    SUBCASE("coverage: every voxel assigned exactly once") {
        // fill maps with a sentinel via a poisoned output check: stitched maps
        // must contain no untouched zeros outside what the network can produce
        Volume tall = random_volume(32, 8, 10);
        McConfig cfg;
        cfg.samples = 1;
        cfg.seed = 4;
        cfg.segment_height = 16;
        cfg.segment_overlap = 8;
        PredictiveOutput seg = segmented_inference(w, tall, cfg);
        // aleatoric is strictly positive everywhere a tile wrote; zeros would
        // mark uncovered voxels
        for (float v : seg.aleatoric.data) CHECK(v > 0.0f);
    }
    SUBCASE("overlap >= tile rejected") {
        McConfig cfg;
        cfg.samples = 1;
        cfg.segment_height = 8;
        cfg.segment_overlap = 8;
        Volume tall = random_volume(32, 8, 11);
        CHECK_THROWS_AS(segmented_inference(w, tall, cfg), ConfigError);
    }
}
