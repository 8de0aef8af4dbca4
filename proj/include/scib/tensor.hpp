#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace scib {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct DivergenceError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

// Dense row-major tensor. Most of the code uses the 4-axis (N, C, H, W)
// layout; lower ranks are used for biases and scalars.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    }
    TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw ShapeError("tensor: buffer length does not match shape product");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int e : s) {
            if (e < 0) throw ShapeError("tensor: negative extent");
            n *= e;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    T& at(int n, int c, int h, int w) {
        return data[static_cast<size_t>(((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    const T& at(int n, int c, int h, int w) const {
        return data[static_cast<size_t>(((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }
};

using Tensor = TensorT<float>;

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Deterministic counter-style generator.
//
// State advances with the splitmix64 permutation. Child streams are derived
// from the *root* seed and a label: child_seed = mix(root_seed ^ fnv1a(label)),
// so derivation commutes with draws and (seed, label) pairs are stable.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : root_(seed), state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller; pairs are cached so draw order is fixed
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    RngStream child(std::string_view label) const {
        uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
        for (char ch : label) {
            h ^= static_cast<unsigned char>(ch);
            h *= 0x100000001B3ull;
        }
        return RngStream(mix(root_ ^ h));
    }

    RngStream child(uint64_t index) const {
        return RngStream(mix(root_ ^ (0xA24BAED4963EE407ull + index * 0x9FB21C651E98DF25ull)));
    }

    uint64_t root_seed() const { return root_; }

private:
    static uint64_t mix(uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    uint64_t root_;
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace scib
