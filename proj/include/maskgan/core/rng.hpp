#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace maskgan {

/// Explicit random stream. Draws depend only on the engine state, so
/// save_state()/load_state() make a stream resumable bit-for-bit.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }
    /// Standard normal via Box-Muller; no cached second draw.
    double normal();

    std::string save_state() const;
    void load_state(const std::string& state);

    /// Child stream for a labelled purpose, independent of this stream's
    /// position.
    static Rng derive(std::uint64_t seed, std::uint64_t stream);

private:
    std::mt19937_64 engine_;
};

}  // namespace maskgan
