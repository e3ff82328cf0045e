#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowbench/nn/tensor.hpp"

namespace flowbench::nn {

// Named-tensor checkpoint container. On disk:
//   magic "FLOWCKPT", version byte (1), entry count u32le, then per entry:
//   name length u32le, UTF-8 name, rank u32le, extents u32le each,
//   data as f32le. Round-trips are bit-exact.
//
// The configuration fingerprint of the producing run is stored as a regular
// rank-1 entry named "__meta/config_fp" holding the 64-bit hash split into
// two bit-cast f32 words.
struct Checkpoint {
    std::vector<std::pair<std::string, TensorF>> entries;

    void add(const std::string& name, TensorF t) { entries.emplace_back(name, std::move(t)); }

    const TensorF* find(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return &t;
        return nullptr;
    }

    const TensorF& require(const std::string& name) const {
        const TensorF* t = find(name);
        if (!t) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
        return *t;
    }

    void set_fingerprint(std::uint64_t fp) {
        TensorF t(Shape{2});
        std::uint32_t lo = static_cast<std::uint32_t>(fp & 0xffffffffu);
        std::uint32_t hi = static_cast<std::uint32_t>(fp >> 32);
        std::memcpy(&t.data[0], &lo, 4);
        std::memcpy(&t.data[1], &hi, 4);
        add(kFingerprintKey, std::move(t));
    }

    std::uint64_t fingerprint() const {
        const TensorF* t = find(kFingerprintKey);
        if (!t || t->data.size() != 2) return 0;
        std::uint32_t lo = 0, hi = 0;
        std::memcpy(&lo, &t->data[0], 4);
        std::memcpy(&hi, &t->data[1], 4);
        return (static_cast<std::uint64_t>(hi) << 32) | lo;
    }

    static constexpr const char* kFingerprintKey = "__meta/config_fp";
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32_array(std::ostream& os, const float* p, std::size_t n) {
    static_assert(sizeof(float) == 4);
    // Little-endian hosts write the raw bytes; this project targets x86-64.
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 4));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write("FLOWCKPT", 8);
    char version = 1;
    os.write(&version, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(ckpt.entries.size()));
    for (const auto& [name, t] : ckpt.entries) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t.shape.rank));
        for (int i = 0; i < t.shape.rank; ++i) detail::put_u32(os, static_cast<std::uint32_t>(t.shape[i]));
        detail::put_f32_array(os, t.ptr(), t.data.size());
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "FLOWCKPT", 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    char version = 0;
    is.read(&version, 1);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
    std::uint32_t count = detail::get_u32(is);
    Checkpoint ckpt;
    for (std::uint32_t e = 0; e < count; ++e) {
        std::uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        std::uint32_t rank = detail::get_u32(is);
        if (rank > 4) throw std::runtime_error("checkpoint: rank > 4");
        Shape s;
        s.rank = static_cast<int>(rank);
        for (std::uint32_t i = 0; i < rank; ++i) s[static_cast<int>(i)] = static_cast<int>(detail::get_u32(is));
        TensorF t(s);
        is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.data.size() * 4));
        if (!is) throw std::runtime_error("checkpoint: truncated tensor data");
        ckpt.add(name, std::move(t));
    }
    return ckpt;
}

}  // namespace flowbench::nn
