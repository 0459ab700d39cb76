#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace stylebrush {

/// 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed derivation used everywhere randomness is needed:
///   derive_seed(master, name)          = splitmix64(master ^ fnv1a64(name))
///   derive_seed(master, name, i, j...) = derive_seed(derive_seed(master, name), i) ...
/// so a run is fully determined by its master seed and the stream names.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stream) {
    return splitmix64(master ^ fnv1a64(stream));
}

template <class... Indices>
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t index, Indices... rest) {
    std::uint64_t s = splitmix64(derive_seed(master, stream) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
    ((s = splitmix64(s ^ splitmix64(static_cast<std::uint64_t>(rest) + 0x632be59bd9b4e019ULL))), ...);
    return s;
}

/// Portable random stream: mt19937_64 engine with hand-rolled uniform and
/// normal transforms, so sequences do not depend on the standard library's
/// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        const auto span = static_cast<std::uint64_t>(static_cast<std::int64_t>(hi) - lo) + 1;
        // Rejection sampling removes modulo bias.
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % span);
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return static_cast<int>(lo + static_cast<std::int64_t>(r % span));
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_ << ' ' << has_spare_ << ' ' << std::hexfloat << spare_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_ >> has_spare_;
        std::string spare;
        is >> spare;
        spare_ = std::strtod(spare.c_str(), nullptr);
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace stylebrush
