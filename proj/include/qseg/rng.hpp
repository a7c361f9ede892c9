#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace qseg {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view text) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Every consumer of randomness derives its own stream from the root seed and
/// a tag, so partial reruns (e.g. eval only) see identical streams.
inline uint64_t derive_seed(uint64_t root, std::string_view tag) {
    uint64_t state = root ^ fnv1a64(tag);
    return splitmix64(state);
}

inline uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t index) {
    uint64_t state = root ^ fnv1a64(tag);
    state ^= 0x94d049bb133111ebULL * (index + 1);
    return splitmix64(state);
}

inline std::mt19937_64 make_rng(uint64_t root, std::string_view tag) {
    return std::mt19937_64(derive_seed(root, tag));
}

inline std::mt19937_64 make_rng(uint64_t root, std::string_view tag, uint64_t index) {
    return std::mt19937_64(derive_seed(root, tag, index));
}

}  // namespace qseg
