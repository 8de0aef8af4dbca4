#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scib/tensor.hpp"

namespace scib {

// 2D image grid with seed provenance. Binary masks are stored as 0/1 floats.
struct Volume {
    int height = 0;
    int width = 0;
    std::vector<float> data;
    float spacing = 1.0f;       // physical units per voxel, informational
    uint64_t seed = 0;          // provenance
    int generator_version = 1;  // provenance

    Volume() = default;
    Volume(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0.0f) {
        if (h <= 0 || w <= 0) throw ShapeError("volume: dims must be positive");
    }

    float& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    float at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    Tensor as_tensor() const { return Tensor({1, 1, height, width}, data); }
    static Volume from_tensor_plane(const Tensor& t, int n = 0, int c = 0) {
        Volume v(t.dim(2), t.dim(3));
        const float* src = &t.at(n, c, 0, 0);
        std::copy(src, src + v.numel(), v.data.begin());
        return v;
    }
};

// SCIV container: magic "SCIV", version byte 1, u8 ndim, ndim x u32 LE
// extents, then raw little-endian 32-bit floats in row-major order.
void write_volume(const Volume& v, const std::string& path);
Volume read_volume(const std::string& path);

// 8-bit binary PGM, min-max scaled; "<path>.scale.txt" records min and max.
void write_pgm(const Volume& v, const std::string& path);

}  // namespace scib
