#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace skillrank {

// splitmix64 step; used to derive independent stream seeds from a master seed
// so that per-video / per-fold work is deterministic regardless of execution order.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
    return splitmix64(splitmix64(master ^ (stream * 0x9e3779b97f4a7c15ULL)) + index);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Unbiased integer in [0, n); avoids the implementation-defined
// std::uniform_int_distribution so shuffles are stable across toolchains.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = rng();
    while (v >= limit) v = rng();
    return v % n;
}

template <typename T>
void shuffle_indices(std::vector<T>& items, std::mt19937_64& rng) {
    for (std::size_t i = items.size(); i > 1; --i)
        std::swap(items[i - 1], items[bounded(rng, i)]);
}

}  // namespace skillrank
