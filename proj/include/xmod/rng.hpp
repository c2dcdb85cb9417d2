#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>

namespace xmod {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Folds a tuple of integers into one stream key. Order matters.
constexpr std::uint64_t stream_key(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x6A09E667F3BCC909ULL;
    for (auto p : parts) h = mix64(h ^ mix64(p));
    return h;
}

// Counter-based generator: the n-th draw of stream `key` is mix64(key + n * golden).
// Streams keyed by (seed, step, index) are independent of the order they are consumed in.
class CounterRng {
  public:
    using result_type = std::uint64_t;

    explicit CounterRng(std::uint64_t key) : key_(key) {}
    CounterRng(std::initializer_list<std::uint64_t> parts) : key_(stream_key(parts)) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() { return next_u64(); }

    std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++)); }

    // Uniform in the open interval (0, 1), 53-bit resolution.
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; the paired value is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Standard normal restricted to [-limit, limit] by rejection.
    double truncated_normal(double limit = 2.0) {
        for (;;) {
            const double v = normal();
            if (std::abs(v) <= limit) return v;
        }
    }

    std::uint64_t key() const { return key_; }

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace xmod
