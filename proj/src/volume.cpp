#include "scib/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace scib {

namespace {

static_assert(std::endian::native == std::endian::little,
              "SCIV i/o assumes a little-endian host");

constexpr char kMagic[4] = {'S', 'C', 'I', 'V'};
constexpr uint8_t kVersion = 1;
constexpr uint32_t kMaxExtent = 1u << 24;

void put_u32(std::ostream& os, uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    os.write(b, 4);
}

uint32_t get_u32(std::istream& is) {
    char b[4];
    is.read(b, 4);
    uint32_t v;
    std::memcpy(&v, b, 4);
    return v;
}

}  // namespace

void write_volume(const Volume& v, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("sciv: cannot open for write: " + path);
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    os.put(static_cast<char>(2));  // ndim
    put_u32(os, static_cast<uint32_t>(v.height));
    put_u32(os, static_cast<uint32_t>(v.width));
    os.write(reinterpret_cast<const char*>(v.data.data()),
             static_cast<std::streamsize>(v.data.size() * sizeof(float)));
    if (!os) throw DataError("sciv: write failed: " + path);
}

Volume read_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("sciv: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("sciv: bad magic bytes in " + path);
    int version = is.get();
    if (version != kVersion)
        throw DataError("sciv: unsupported version " + std::to_string(version) + " in " + path);
    int ndim = is.get();
    if (ndim != 2) throw DataError("sciv: expected 2 dims, got " + std::to_string(ndim) + " in " + path);
    uint32_t h = get_u32(is);
    uint32_t w = get_u32(is);
    if (!is) throw DataError("sciv: truncated header in " + path);
    if (h == 0 || w == 0 || h > kMaxExtent || w > kMaxExtent ||
        static_cast<uint64_t>(h) * w > (static_cast<uint64_t>(1) << 31))
        throw DataError("sciv: extent overflow (" + std::to_string(h) + "x" + std::to_string(w) +
                        ") in " + path);
    Volume v(static_cast<int>(h), static_cast<int>(w));
    is.read(reinterpret_cast<char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(v.data.size() * sizeof(float)))
        throw DataError("sciv: payload shorter than header-declared size in " + path);
    return v;
}

void write_pgm(const Volume& v, const std::string& path) {
    float lo = std::numeric_limits<float>::max();
    float hi = std::numeric_limits<float>::lowest();
    for (float x : v.data) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    const float range = hi > lo ? hi - lo : 1.0f;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("pgm: cannot open for write: " + path);
    os << "P5\n" << v.width << " " << v.height << "\n255\n";
    for (float x : v.data) {
        float s = (x - lo) / range * 255.0f;
        os.put(static_cast<char>(std::clamp(static_cast<int>(s + 0.5f), 0, 255)));
    }
    if (!os) throw DataError("pgm: write failed: " + path);

    std::ofstream sc(path + ".scale.txt");
    char buf[96];
    std::snprintf(buf, sizeof buf, "min %.9g\nmax %.9g\n", static_cast<double>(lo),
                  static_cast<double>(hi));
    sc << buf;
}

}  // namespace scib
