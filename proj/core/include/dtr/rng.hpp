#pragma once

#include <cstdint>
#include <string_view>

namespace dtr {

// 64-bit FNV-1a; used for stream names and content hashes.
constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Counter-based generator. Draw i of a stream with key k is
/// splitmix64_mix(k + (i + 1) * 0x9E3779B97F4A7C15), i.e. the SplitMix64
/// sequence seeded at k, so any draw can be recomputed from (key, index).
/// Child streams are keyed mix(k ^ fnv1a64(name)); naming a stream never
/// perturbs its parent.
class CounterRng {
public:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

    explicit constexpr CounterRng(std::uint64_t key = 0) noexcept : key_(key) {}

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    constexpr std::uint64_t key() const noexcept { return key_; }
    constexpr std::uint64_t counter() const noexcept { return counter_; }

    constexpr CounterRng split(std::string_view name) const noexcept {
        return CounterRng(mix(key_ ^ fnv1a64(name)));
    }
    constexpr CounterRng split(std::uint64_t index) const noexcept {
        return CounterRng(mix(key_ ^ mix(index + kGolden)));
    }

    constexpr std::uint64_t next_u64() noexcept {
        ++counter_;
        return mix(key_ + counter_ * kGolden);
    }

    // [0, 1) with 53 bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n) by multiply-shift; n > 0.
    std::uint64_t below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Box-Muller, no cached spare: every call consumes exactly two draws.
    double normal() noexcept;

    // Normal(0, stddev) redrawn until within two standard deviations.
    double truncated_normal(double stddev) noexcept;

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace dtr
