#pragma once

#include <cstdint>

namespace sapo {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Independent substream seed for (seed, stream); stable across platforms.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

/// Unbiased integer in [0, n) from any 64-bit engine (rejection sampling).
template <class Engine>
std::uint64_t uniform_below(Engine& gen, std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = gen();
    while (x >= limit) {
        x = gen();
    }
    return x % n;
}

/// Uniform double in [0, 1) with 53 random bits.
template <class Engine>
double uniform01(Engine& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

}  // namespace sapo
