#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace divae {

// Deterministic random source. Wraps mt19937_64 with an explicitly managed
// Box-Muller spare so the full state (engine + spare) can be checkpointed and
// restored exactly.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return std::generate_canonical<double, 53>(gen_);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // integer in [0, n)
    uint64_t integer(uint64_t n) {
        // rejection sampling keeps the draw unbiased
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    std::mt19937_64& engine() { return gen_; }

    std::string serialize() const {
        std::ostringstream ss;
        ss << gen_ << " " << (has_spare_ ? 1 : 0) << " ";
        ss.precision(17);
        ss << spare_;
        return ss.str();
    }

    void deserialize(const std::string& state) {
        std::istringstream ss(state);
        int flag = 0;
        ss >> gen_ >> flag >> spare_;
        has_spare_ = flag != 0;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64; used to derive independent sub-streams from (seed, purpose) pairs
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace divae
