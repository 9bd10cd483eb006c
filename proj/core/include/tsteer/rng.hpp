#pragma once

#include <cstdint>
#include <string_view>

namespace tsteer {

/// Portable 64-bit generator (xoshiro256**), seeded through SplitMix64.
///
/// Stream splitting: the generator for (seed, stream) is seeded from
/// splitmix64(seed ^ splitmix64(stream + 1)). Every synthetic series, forecast
/// sampler and training loop owns exactly one stream, so results do not depend
/// on call order or platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();

    /// Uniform double in [0, 1) with 53 bits of randomness.
    double uniform();

    /// Standard normal via Box-Muller. Both outputs of a transform are consumed
    /// in order: odd calls compute a new pair, even calls return the cached sine.
    double normal();

    /// Poisson draw by sequential inversion. Always consumes exactly one uniform.
    /// Intended for small rates (lambda <= 10).
    std::uint32_t poisson(double lambda);

    /// Uniform integer in [0, n). Uses the multiply-shift reduction.
    std::uint64_t below(std::uint64_t n);

private:
    std::uint64_t s_[4];
    bool has_cached_ = false;
    double cached_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

/// FNV-1a over bytes; used for deriving named sub-seeds and content hashes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Derives a child seed from a parent seed and a label, e.g. ("style", 42).
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label);

}  // namespace tsteer
