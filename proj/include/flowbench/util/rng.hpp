#pragma once

#include <cmath>
#include <cstdint>

namespace flowbench::util {

// PCG32 (O'Neill). Self-contained so that sampled sequences are identical
// across platforms and standard libraries; std::*_distribution is not.
class Pcg32 {
public:
    explicit Pcg32(std::uint64_t seed = 0x853c49e6748fea9bULL, std::uint64_t stream = 0) {
        state_ = 0u;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
        has_spare_ = false;
        spare_ = 0.0;
    }

    // Independent stream for worker `stream_id` of a run seeded with `base_seed`.
    static Pcg32 for_stream(std::uint64_t base_seed, std::uint64_t stream_id) {
        return Pcg32(base_seed, 0x9e3779b97f4a7c15ULL * (stream_id + 1));
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    // Uniform in [0, 1).
    double next_double() { return next_u32() * (1.0 / 4294967296.0); }
    float next_float() { return static_cast<float>(next_double()); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Inclusive bounds.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u32() % static_cast<std::uint32_t>(hi - lo + 1));
    }

    // Standard normal via Box-Muller; the spare value is cached so the
    // sequence is a pure function of the draw count.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 1e-12);
        double u2 = next_double();
        double mag = std::sqrt(-2.0 * std::log(u1));
        double two_pi_u2 = 2.0 * 3.14159265358979323846 * u2;
        spare_ = mag * std::sin(two_pi_u2);
        has_spare_ = true;
        return mag * std::cos(two_pi_u2);
    }

    bool operator==(const Pcg32& o) const {
        return state_ == o.state_ && inc_ == o.inc_ && has_spare_ == o.has_spare_ &&
               (has_spare_ ? spare_ == o.spare_ : true);
    }

private:
    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 1;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace flowbench::util
