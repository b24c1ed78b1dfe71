#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace slimmat {

using real = double;

/// Shape/layout mismatch between tensors or between weights and layer specs.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A configuration that is syntactically valid but semantically rejected
/// (e.g. distillation sites in the decoder while strict mode is on).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A region/scope that must be non-empty was empty.
struct EmptyRegionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Post-condition of an internal rewrite failed; indicates a bug, not user error.
struct InvariantViolation : std::logic_error {
    using std::logic_error::logic_error;
};

// Seeded RNG wrapper. Distributions are hand-rolled on top of the raw
// mt19937_64 stream so that generated values do not depend on the standard
// library's implementation-defined distribution algorithms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1).
    real uniform() {
        return static_cast<real>(engine_() >> 11) * 0x1.0p-53;
    }

    real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        // inclusive range, modulo bias negligible for our ranges
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    /// Standard normal via Box-Muller, one value per call (spare cached).
    real normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        real u1 = uniform();
        real u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const real r = std::sqrt(-2.0 * std::log(u1));
        const real theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    real normal(real mean, real stddev) { return mean + stddev * normal(); }

    /// Deterministic in-place Fisher-Yates shuffle.
    template <class Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(engine_() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    real spare_ = 0.0;
    bool has_spare_ = false;
};

/// Stable mix for deriving per-sample / per-stage seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline real gaussian_pdf(real x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
}

inline real gaussian_cdf(real x) {
    return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

}  // namespace slimmat
