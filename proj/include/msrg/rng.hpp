#pragma once

// Deterministic random-number utilities. All randomness in the library flows
// from one master seed through named sub-streams, so results depend only on
// (seed, stream name) and never on call order across unrelated components.

#include <cstdint>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace msrg {

// FNV-1a, used for seed derivation and content hashing.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a_u64(std::uint64_t value, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (int i = 0; i < 8; ++i) {
        h ^= (value >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Derive an independent stream seed from a master seed and a label.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
    return fnv1a(label, fnv1a_u64(master));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label, std::uint64_t index) {
    return fnv1a_u64(index, derive_seed(master, label));
}

// mt19937_64 wrapper with self-contained distributions. The standard engine
// has a portable textual state format; the distributions here are written out
// explicitly so sequences do not depend on the standard-library vendor.
class Rng {
public:
    Rng() : engine_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), rejection-sampled for exactness.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - (std::numeric_limits<std::uint64_t>::max() % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via the polar method. The spare value is discarded so
    // the generator itself is the only state.
    double normal() {
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        return u * std::sqrt(-2.0 * std::log(s) / s);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool coin() { return (engine_() & 1u) != 0; }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void deserialize(const std::string& state) {
        std::istringstream is(state);
        is >> engine_;
    }

private:
    std::mt19937_64 engine_;
};

// Deterministic Fisher-Yates; depends only on the engine sequence.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
        std::swap(items[i - 1], items[j]);
    }
}

} // namespace msrg
