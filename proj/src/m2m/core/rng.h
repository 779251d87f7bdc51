#pragma once

#include <cmath>
#include <cstdint>

namespace m2m {

// Deterministic splitmix64 stream. Self-contained so that generated datasets
// and training trajectories are reproducible across platforms and library
// versions. State is a single u64, which keeps checkpoint/resume exact.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Caller guarantees n >= 1.
    int uniform_int(int n) {
        int v = int(uniform() * double(n));
        return v < n ? v : n - 1;
    }

    // Standard normal via Box-Muller. Stateless per call (two draws, the sine
    // companion is discarded) so saved state is just the u64 counter.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Independent child stream. Derivation depends only on (state, id), so
    // per-subject generators do not depend on generation order.
    Rng fork(uint64_t id) const {
        Rng child(state_ ^ (0x9e3779b97f4a7c15ull * (id + 0x632be59bd9b4e019ull)));
        child.next_u64();
        return Rng(child.next_u64());
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

}  // namespace m2m
