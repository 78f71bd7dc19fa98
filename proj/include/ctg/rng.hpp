#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace ctg {

// Deterministic seed derivation. Stream seeds (per sample, per epoch, ...)
// are hashed from a master seed so results do not depend on scheduling or
// call order.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = splitmix64(master ^ 0x2545f4914f6cdd1dULL);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    return splitmix64(s ^ c);
}

// mt19937_64 plus hand-rolled distributions. std:: distributions are
// implementation-defined, so sampling goes through these to keep runs
// reproducible across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n));
    }

    // Box-Muller, one value per call (no cached spare, keeps state minimal)
    double gaussian(double mean = 0.0, double stddev = 1.0) {
        double u = 1.0 - uniform();
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        return mean + stddev * r * std::cos(6.283185307179586 * v);
    }

    std::vector<double> gaussian_vector(std::size_t n, double mean, double stddev) {
        std::vector<double> out(n);
        for (auto& x : out) x = gaussian(mean, stddev);
        return out;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace ctg
