#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace utsr {

// Storage/compute scalar. The double build exists only to tighten
// gradient-check tolerances in tests.
#ifdef UTSR_REAL_DOUBLE
using real = double;
#else
using real = float;
#endif

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

#define UTSR_REQUIRE(cond, msg) \
    do {                        \
        if (!(cond)) ::utsr::fail(msg); \
    } while (0)

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s);

// Deterministic RNG. Distributions are hand-rolled so that generated
// streams do not depend on the standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    // uniform in [0,1)
    double uniform() { return double(next_u64() >> 11) * (1.0 / 9007199254740992.0); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive range
    double normal();                              // standard normal, Box-Muller
    double normal(double mean, double std) { return mean + std * normal(); }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace utsr
