#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string_view>

namespace dscl {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t hash_str(std::string_view s) {
    // FNV-1a
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Derive an independent substream seed. Streams keyed by purpose so that
/// consuming one stream never shifts another (bitwise reproducibility).
inline uint64_t derive_seed(uint64_t seed, std::string_view purpose, uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ hash_str(purpose)) ^ index);
}

/// Deterministic RNG for one stream. Same machine + same seed = same draws.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(eng_);
    }
    double normal(double mean, double stddev) {
        std::normal_distribution<double> d(mean, stddev);
        return d(eng_);
    }
    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        std::uniform_int_distribution<int64_t> d(lo, hi);
        return d(eng_);
    }
    template <typename It>
    void shuffle(It begin, It end) {
        std::shuffle(begin, end, eng_);
    }
    template <typename C>
    void shuffle(C& container) {
        std::shuffle(container.begin(), container.end(), eng_);
    }
    std::mt19937_64& engine() { return eng_; }

  private:
    std::mt19937_64 eng_;
};

}  // namespace dscl
