#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace fspool {

// Deterministic random source. mt19937_64 is fully specified by the standard;
// the distributions below are implemented here because the std ones are
// implementation-defined and would break byte-identical reproducibility.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    float uniform_f32(float lo, float hi) {
        return lo + static_cast<float>(uniform()) * (hi - lo);
    }

    // Standard normal via Box-Muller, second value cached.
    double gaussian() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // Unbiased draw from [0, n).
    uint64_t below(uint64_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return x % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // Moves k uniformly chosen distinct elements to the front, in random order.
    template <class T>
    void partial_shuffle(std::vector<T>& v, size_t k) {
        for (size_t i = 0; i < k && i + 1 < v.size(); ++i) {
            std::swap(v[i], v[i + below(v.size() - i)]);
        }
    }

  private:
    std::mt19937_64 gen_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

// FNV-1a, used for stream derivation and file digests.
inline uint64_t fnv1a64(const void* bytes, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// splitmix64, used to derive independent seeds from (seed, role) pairs.
inline uint64_t mix_seed(uint64_t seed, uint64_t role) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (role + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace fspool
