#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace aiiw {

// Counter-based random streams. A stream is identified by a key hashed from
// (seed, indices..., purpose); draw i of a stream depends only on the key and
// i, so results do not depend on which worker generated them or in what order.

enum class StreamPurpose : std::uint64_t {
    simulate = 1,
    bootstrap = 2,
    truth = 3,
    test = 4,
};

namespace detail {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

class Rng {
public:
    Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> indices, StreamPurpose purpose) {
        std::uint64_t k = detail::mix64(seed ^ 0x6a09e667f3bcc909ULL);
        for (std::uint64_t i : indices) k = detail::mix64(k ^ detail::mix64(i + 0x9e3779b97f4a7c15ULL));
        key_ = detail::mix64(k ^ static_cast<std::uint64_t>(purpose));
    }

    std::uint64_t next_u64() {
        ++counter_;
        return detail::mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

    /// Uniform integer on {0, ..., n - 1}.
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace aiiw
