#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace metaplastic {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a master seed and a list of tags,
// e.g. derive_seed(seed, {stream::phase, phase_index}).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t h = mix64(seed);
    for (auto t : tags) h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
    return h;
}

namespace stream {
inline constexpr std::uint64_t weights = 1;
inline constexpr std::uint64_t flexibility = 2;
inline constexpr std::uint64_t extractor = 3;
inline constexpr std::uint64_t compose = 4;
inline constexpr std::uint64_t phase = 5;
inline constexpr std::uint64_t shuffle = 6;
inline constexpr std::uint64_t schedule = 7;
inline constexpr std::uint64_t items = 8;
inline constexpr std::uint64_t poison = 9;
}  // namespace stream

}  // namespace metaplastic
