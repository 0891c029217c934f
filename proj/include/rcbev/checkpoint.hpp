#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "rcbev/tensor.hpp"

namespace rcbev {

// Flat binary checkpoint: magic "RBNV1", little-endian u32 tensor count, then
// per tensor: u32 name length, name bytes, u32 rank, u32 dims..., f64 data.

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void save_checkpoint(const std::vector<NamedParam>& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
    os.write("RBNV1", 5);
    detail::write_u32(os, static_cast<uint32_t>(params.size()));
    for (const auto& np : params) {
        detail::write_u32(os, static_cast<uint32_t>(np.name.size()));
        os.write(np.name.data(), static_cast<std::streamsize>(np.name.size()));
        const Tensor& t = np.p->value;
        detail::write_u32(os, static_cast<uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) detail::write_u32(os, static_cast<uint32_t>(t.dim(d)));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

/// Loads by name into the given parameter set; every parameter must be
/// present with a matching shape.
inline void load_checkpoint(const std::vector<NamedParam>& params, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, "RBNV1", 5) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    const uint32_t count = detail::read_u32(is);
    std::map<std::string, Tensor> loaded;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = detail::read_u32(is);
        if (name_len > 4096) throw std::runtime_error("checkpoint: implausible name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated name");
        const uint32_t rank = detail::read_u32(is);
        if (rank > 8) throw std::runtime_error("checkpoint: implausible rank");
        std::vector<int> shape;
        for (uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(detail::read_u32(is)));
        Tensor t(shape);
        if (!is.read(reinterpret_cast<char*>(t.data()),
                     static_cast<std::streamsize>(t.size() * sizeof(double)))) {
            throw std::runtime_error("checkpoint: truncated data for " + name);
        }
        loaded.emplace(name, std::move(t));
    }
    for (const auto& np : params) {
        auto it = loaded.find(np.name);
        if (it == loaded.end()) throw std::runtime_error("checkpoint: missing tensor " + np.name);
        if (!(it->second.shape() == np.p->value.shape())) {
            throw std::runtime_error("checkpoint: shape mismatch for " + np.name);
        }
        np.p->value = it->second;
    }
}

/// FNV-1a over the raw bytes of all parameter values, in collection order.
/// Used by the stage-2 freeze contract check and run manifests.
inline uint64_t params_hash(const std::vector<NamedParam>& params) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& np : params) {
        mix(np.name.data(), np.name.size());
        mix(np.p->value.data(), static_cast<size_t>(np.p->value.size()) * sizeof(double));
    }
    return h;
}

}  // namespace rcbev
