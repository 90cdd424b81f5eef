#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mclokd {

/// Seeded random stream with platform-independent draws.
///
/// Wraps std::mt19937_64 (whose output sequence is fixed by the standard) and
/// implements the distributions here, since the std:: distribution adaptors
/// are implementation-defined. State round-trips through `state()`/`set_state()`.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal (Box-Muller, one value per call).
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Child stream whose seed is derived from this one's next output.
    Rng split() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }

    std::string state() const;
    void set_state(const std::string& s);

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace mclokd
