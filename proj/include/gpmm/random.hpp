#pragma once

#include <cstdint>
#include <random>

namespace gpmm {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent sub-seeds from one master seed.
inline std::uint64_t mix_seed(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based split: the same (seed, stream, counter) always yields the same sub-seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter = 0)
{
    return mix_seed(mix_seed(mix_seed(seed) ^ stream) ^ counter);
}

namespace seed_stream {
inline constexpr std::uint64_t env = 1;
inline constexpr std::uint64_t cem = 2;
inline constexpr std::uint64_t distill = 3;
inline constexpr std::uint64_t hyper = 4;
inline constexpr std::uint64_t reservoir = 5;
inline constexpr std::uint64_t warmup = 6;
inline constexpr std::uint64_t stream = 7;
} // namespace seed_stream

} // namespace gpmm
