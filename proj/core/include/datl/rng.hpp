#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace datl {

/// mt19937_64 with hand-rolled distributions. The engine itself is specified
/// by the standard, the library distributions are not, so runs stay
/// reproducible across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1), 53 bits of mantissa.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n). n must be nonzero.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Box-Muller, cosine branch only; consumes two uniforms per call.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
        return mean + stddev * z;
    }

    /// Fisher-Yates with our own bounded draw.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    static constexpr double kTwoPi = 6.283185307179586476925286766559;
    std::mt19937_64 engine_;
};

}  // namespace datl
