#pragma once

#include <array>
#include <cstdint>

namespace danp {

/// splitmix64 finalizer; also the sub-seed mixer: derive_seed(seed, index)
/// = splitmix64(seed ^ splitmix64(index + 0x9E3779B97F4A7C15)).
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// xoshiro256** with portable uniform/normal draws, so streams agree
/// across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64();
    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Inclusive integer range, unbiased.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    /// Standard normal via Box-Muller (pairs cached).
    double normal();

    using State = std::array<std::uint64_t, 4>;
    State state() const { return s_; }
    void set_state(const State& s) {
        s_ = s;
        has_spare_ = false;
    }

  private:
    State s_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace danp
