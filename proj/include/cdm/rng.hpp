#pragma once

#include <cstdint>
#include <cstring>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <utility>

namespace cdm {

// splitmix64 finalizer. Used to derive statistically independent stream seeds
// from a base seed plus structural indices (patient id, chain id, ...), so that
// parallel work units own private streams and results never depend on thread
// scheduling.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0,
                                 std::uint64_t d = 0) {
    std::uint64_t h = mix64(base ^ 0x6a09e667f3bcc909ull);
    h = mix64(h ^ a);
    h = mix64(h ^ b);
    h = mix64(h ^ c);
    return mix64(h ^ d);
}

// Deterministic RNG stream. The distribution mappings (uniform, normal,
// integer) are implemented here instead of using <random> distribution
// adaptors, whose algorithms are implementation-defined; this pins the exact
// draw sequence for reproducibility.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n); rejection sampling, bias-free.
    int uniform_int(int n) {
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t r;
        do {
            r = eng_();
        } while (r >= limit);
        return static_cast<int>(r % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Marsaglia's polar method with spare caching.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    double normal(double mu, double sd) { return mu + sd * normal(); }

    // Normal truncated to [-bound, bound] standard deviations (rejection).
    double trunc_normal(double sd, double bound = 2.0) {
        double z;
        do {
            z = normal();
        } while (std::fabs(z) > bound);
        return sd * z;
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            const int j = uniform_int(static_cast<int>(i + 1));
            std::swap(first[i], first[j]);
        }
    }

    // State serialization for checkpoint/resume. The engine state plus the
    // cached polar spare must round-trip exactly.
    std::string save_state() const {
        std::ostringstream os;
        os << eng_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
        std::uint64_t bits = 0;
        static_assert(sizeof(bits) == sizeof(spare_));
        std::memcpy(&bits, &spare_, sizeof(bits));
        os << bits;
        return os.str();
    }

    void load_state(const std::string& state) {
        std::istringstream is(state);
        int flag = 0;
        std::uint64_t bits = 0;
        is >> eng_ >> flag >> bits;
        has_spare_ = (flag != 0);
        std::memcpy(&spare_, &bits, sizeof(spare_));
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace cdm
