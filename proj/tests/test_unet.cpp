#include "scib/unet.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include "doctest.h"
#include "helpers.hpp"
#include "scib/loss.hpp"

using namespace scib;
using namespace scib::test;

namespace {

UNetConfig tiny_config() {
    UNetConfig c;
    c.levels = 1;
    c.base_channels = 2;
    c.dropout_rate = 0.2;
    return c;
}

}  // namespace

TEST_CASE("build_model is deterministic per seed") {
    UNetConfig cfg;
    RngStream r1(100), r2(100), r3(101);
    NetworkWeights a = build_model(cfg, r1);
    NetworkWeights b = build_model(cfg, r2);
    NetworkWeights c = build_model(cfg, r3);
    REQUIRE(a.params.size() == b.params.size());
    for (size_t i = 0; i < a.params.size(); ++i) {
        CHECK(a.params[i].first == b.params[i].first);
        CHECK(a.params[i].second.data == b.params[i].second.data);
    }
    bool any_diff = false;
    for (size_t i = 0; i < a.params.size(); ++i)
        if (a.params[i].second.data != c.params[i].second.data) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("parameter inventory: fixed count, no dropout entries in head paths") {
    UNetConfig cfg;  // levels=3, base=16, in=1
    RngStream r(1);
    NetworkWeights w = build_model(cfg, r);
    // parameter count is a pure function of the config
    RngStream r2(999);
    CHECK(build_model(cfg, r2).parameter_count() == w.parameter_count());
    CHECK(w.parameter_count() > 0);
    int head_params = 0;
    for (const auto& [name, t] : w.params) {
        CHECK(name.find("drop") == std::string::npos);
        if (name.rfind("head_", 0) == 0) ++head_params;
    }
    CHECK(head_params == 8);  // two heads, two convs each, kernel+bias
}

TEST_CASE("forward shape preservation and mode contract") {
    UNetConfig cfg = tiny_config();
    RngStream r(5);
    NetworkWeights w = build_model(cfg, r);
    Tensor x = random_tensor<float>({2, 1, 8, 6}, r);

    SUBCASE("outputs share the input's spatial shape") {
        RngStream fr(0);
        ForwardResult out = forward(w, x, ForwardMode::deterministic, fr);
        CHECK(out.y_hat.shape == std::vector<int>{2, 1, 8, 6});
        CHECK(out.log_sigma2.shape == std::vector<int>{2, 1, 8, 6});
    }
    SUBCASE("deterministic mode is a pure function of weights and input") {
        RngStream f1(1), f2(2);
        ForwardResult a = forward(w, x, ForwardMode::deterministic, f1);
        ForwardResult b = forward(w, x, ForwardMode::deterministic, f2);
        CHECK(a.y_hat.data == b.y_hat.data);
        CHECK(a.log_sigma2.data == b.log_sigma2.data);
    }
    SUBCASE("mc_sample with different streams differs somewhere") {
        RngStream f1(1), f2(2);
        ForwardResult a = forward(w, x, ForwardMode::mc_sample, f1);
        ForwardResult b = forward(w, x, ForwardMode::mc_sample, f2);
        CHECK(a.y_hat.data != b.y_hat.data);
    }
    SUBCASE("mc_sample variance collapses to zero iff dropout_rate is 0") {
        UNetConfig c0 = cfg;
        c0.dropout_rate = 0.0;
        RngStream br(5);
        NetworkWeights w0 = build_model(c0, br);
        RngStream f1(1), f2(2);
        ForwardResult a = forward(w0, x, ForwardMode::mc_sample, f1);
        ForwardResult b = forward(w0, x, ForwardMode::mc_sample, f2);
        CHECK(a.y_hat.data == b.y_hat.data);
    }
    SUBCASE("log_sigma2 is clamped to [-10, 10]") {
        RngStream fr(3);
        ForwardResult out = forward(w, x, ForwardMode::mc_sample, fr);
        for (float v : out.log_sigma2.data) {
            CHECK(v >= -10.0f);
            CHECK(v <= 10.0f);
        }
    }
}

TEST_CASE("forward rejects extents not divisible by 2^levels") {
    UNetConfig cfg = tiny_config();
    cfg.levels = 2;
    RngStream r(5);
    NetworkWeights w = build_model(cfg, r);
    Tensor x({1, 1, 6, 8});  // 6 not divisible by 4
    RngStream fr(0);
    CHECK_THROWS_AS(forward(w, x, ForwardMode::deterministic, fr), ShapeError);
}

TEST_CASE("tape backward matches a directional derivative through the whole network") {
    // Per-element FD on a float network is too noisy (rounding plus ReLU
    // kinks), so the composed tape is checked along whole-parameter-space
    // directions instead: d/dt L(theta + t*d) at t=0 vs <grad, d>.
    UNetConfig cfg = tiny_config();
    cfg.dropout_rate = 0.0;  // FD needs a deterministic path
    RngStream r(7);
    NetworkWeights w = build_model(cfg, r);
    Tensor x = random_tensor<float>({1, 1, 4, 4}, r);
    Tensor y = random_tensor<float>({1, 1, 4, 4}, r);

    RngStream fr(0);
    Tape tape;
    ForwardResult out = forward(w, x, ForwardMode::deterministic, fr, &tape);
    auto loss = heteroscedastic_loss(y, out.y_hat, out.log_sigma2);
    auto grads = tape.backward(w, loss.grad_y_hat, loss.grad_log_sigma2);
    for (const auto& [name, t] : w.params) REQUIRE(grads.count(name) == 1);

    auto eval = [&] {
        RngStream er(0);
        ForwardResult o = forward(w, x, ForwardMode::deterministic, er);
        return heteroscedastic_loss(y, o.y_hat, o.log_sigma2).loss;
    };

    RngStream dr(123);
    for (int probe = 0; probe < 5; ++probe) {
        // random unit direction across every parameter tensor
        std::map<std::string, std::vector<double>> dir;
        double norm2 = 0.0;
        for (const auto& [name, t] : w.params) {
            auto& d = dir[name];
            d.resize(t.data.size());
            for (auto& v : d) {
                v = dr.uniform(-1.0, 1.0);
                norm2 += v * v;
            }
        }
        const double norm = std::sqrt(norm2);
        double analytic = 0.0;
        for (auto& [name, d] : dir) {
            const auto& g = grads.at(name).data;
            for (size_t i = 0; i < d.size(); ++i) {
                d[i] /= norm;
                analytic += d[i] * static_cast<double>(g[i]);
            }
        }

        const double h = 1e-3;
        auto shift = [&](double t) {
            for (auto& [name, d] : dir) {
                auto& p = w.at(name).data;
                for (size_t i = 0; i < d.size(); ++i)
                    p[i] = static_cast<float>(static_cast<double>(p[i]) + t * d[i]);
            }
        };
        std::vector<std::vector<float>> saved;
        for (const auto& [name, t] : w.params) saved.push_back(t.data);
        auto restore = [&] {
            for (size_t i = 0; i < w.params.size(); ++i) w.params[i].second.data = saved[i];
        };
        shift(+h);
        const double up = eval();
        restore();
        shift(-h);
        const double dn = eval();
        restore();
        const double fd = (up - dn) / (2.0 * h);
        INFO("probe ", probe, " analytic ", analytic, " fd ", fd);
        CHECK(rel_err(analytic, fd, 1e-3) < 2e-2);
    }
}

TEST_CASE("checkpoint round-trip reproduces forward bit-exactly") {
    UNetConfig cfg = tiny_config();
    RngStream r(9);
    NetworkWeights w = build_model(cfg, r);
    const std::string path = "test_ckpt.bin";
    save_checkpoint(w, path);
    NetworkWeights loaded = load_checkpoint(path);
    std::remove(path.c_str());

    REQUIRE(loaded.params.size() == w.params.size());
    for (size_t i = 0; i < w.params.size(); ++i) {
        CHECK(loaded.params[i].first == w.params[i].first);
        CHECK(loaded.params[i].second.data == w.params[i].second.data);
    }
    Tensor x = random_tensor<float>({1, 1, 4, 4}, r);
    RngStream f1(3), f2(3);
    ForwardResult a = forward(w, x, ForwardMode::mc_sample, f1);
    ForwardResult b = forward(loaded, x, ForwardMode::mc_sample, f2);
    CHECK(a.y_hat.data == b.y_hat.data);
    CHECK(a.log_sigma2.data == b.log_sigma2.data);
}
