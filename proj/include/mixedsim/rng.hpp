#pragma once

#include <cmath>
#include <cstdint>

namespace mixedsim {

// Counter-based generator: every draw is a pure function of
// (seed, stream, counter), so results do not depend on how work is
// split across threads.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream) {}

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::uint64_t bits(std::uint64_t counter) const {
        std::uint64_t h = mix(seed_ ^ 0x2545f4914f6cdd1dULL);
        h = mix(h ^ stream_);
        return mix(h ^ counter);
    }

    // uniform in [0, 1)
    double uniform(std::uint64_t counter) const {
        return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
    }

    double uniform(std::uint64_t counter, double lo, double hi) const {
        return lo + (hi - lo) * uniform(counter);
    }

    // standard normal via Box-Muller; consumes counters 2k and 2k+1
    double normal(std::uint64_t counter) const {
        const double u1 = static_cast<double>((bits(2 * counter) >> 11) + 1) * 0x1.0p-53;
        const double u2 = uniform(2 * counter + 1);
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(std::uint64_t counter, double mean, double sigma) const {
        return mean + sigma * normal(counter);
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
};

// Stream tags keep independent random sources from colliding on the
// same (seed, counter) pairs.
namespace rng_stream {
inline constexpr std::uint64_t kCrossbarInit = 1;
inline constexpr std::uint64_t kAlpha = 2;
inline constexpr std::uint64_t kFaults = 3;
inline constexpr std::uint64_t kNoise = 4;
inline constexpr std::uint64_t kDataset = 5;
inline constexpr std::uint64_t kWeightsInit = 6;
inline constexpr std::uint64_t kShuffle = 7;
inline constexpr std::uint64_t kDisturb = 8;
inline constexpr std::uint64_t kTargets = 9;
}  // namespace rng_stream

}  // namespace mixedsim
