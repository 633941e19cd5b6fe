#ifndef EBLMM_RNG_HPP
#define EBLMM_RNG_HPP

#include <array>
#include <cmath>
#include <cstdint>

namespace eblmm {

/// Philox4x32-10 block function.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kM0 = 0xD2511F53u;
    constexpr std::uint32_t kM1 = 0xCD9E8D57u;
    constexpr std::uint32_t kW0 = 0x9E3779B9u;
    constexpr std::uint32_t kW1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const auto lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const auto lo1 = static_cast<std::uint32_t>(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kW0;
        key[1] += kW1;
    }
    return ctr;
}

/// Independent random stream for one (seed, replicate, purpose) triple.
///
/// The 64-bit seed is the Philox key; the counter is
/// (block low, block high, replicate, purpose), so streams never overlap
/// and a draw does not depend on which thread produced the others.
class RandomStream {
public:
    RandomStream(std::uint64_t seed, std::uint32_t replicate, std::uint32_t purpose)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          replicate_(replicate), purpose_(purpose) {}

    std::uint32_t next_u32() {
        if (pos_ == 4) {
            buffer_ = philox4x32({static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
                                  replicate_, purpose_},
                                 key_);
            ++block_;
            pos_ = 0;
        }
        return buffer_[pos_++];
    }

    /// Uniform on (0, 1) with 53 random bits.
    double uniform() {
        const std::uint64_t hi = next_u32() >> 5;
        const std::uint64_t lo = next_u32() >> 6;
        return (static_cast<double>((hi << 26) | lo) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal by Box-Muller; the second variate is kept for the next call.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * M_PI * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    /// Uniform integer in [0, bound).
    std::uint32_t below(std::uint32_t bound) {
        const std::uint32_t limit = bound * (0xFFFFFFFFu / bound);
        std::uint32_t v;
        do {
            v = next_u32();
        } while (v >= limit);
        return v % bound;
    }

private:
    std::array<std::uint32_t, 2> key_;
    std::uint32_t replicate_;
    std::uint32_t purpose_;
    std::uint64_t block_ = 0;
    std::array<std::uint32_t, 4> buffer_{};
    int pos_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace eblmm

#endif // EBLMM_RNG_HPP
