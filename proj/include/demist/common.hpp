#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace demist {

// Error taxonomy: distinct types so callers/tests can tell failure modes apart.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};
struct TruncatedError : Error {
    explicit TruncatedError(const std::string& msg) : Error(msg) {}
};
struct DimError : Error {
    explicit DimError(const std::string& msg) : Error(msg) {}
};
struct ValueError : Error {
    explicit ValueError(const std::string& msg) : Error(msg) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ValueError(msg);
}

// FNV-1a over raw bytes. Used for tensor freeze audits and seed->fold hashing;
// kept local so results do not depend on the standard library's std::hash.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t seed = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t seed = 1469598103934665603ull) {
    return fnv1a(s.data(), s.size(), seed);
}

// Derive an independent stream seed from (base, tag, index). All randomness in
// the pipeline flows through this so any step can be reproduced in isolation.
inline uint64_t derive_seed(uint64_t base, const std::string& tag, uint64_t index = 0) {
    uint64_t h = fnv1a(&base, sizeof(base));
    h = fnv1a(tag, h);
    h = fnv1a(&index, sizeof(index), h);
    return h ? h : 0x9e3779b97f4a7c15ull;
}

// Deterministic normal/uniform generator. Box-Muller on top of mt19937_64;
// std::normal_distribution is implementation-defined, this is not.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double uniform() {  // [0,1)
        return (gen_() >> 11) * (1.0 / 9007199254740992.0);
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(gen_() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(th);
        have_spare_ = true;
        return r * std::cos(th);
    }

    uint64_t next_u64() { return gen_(); }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace demist
