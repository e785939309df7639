#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace exitaudit {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Every module seed in a run is derived from the master seed and a tag,
// so independent stages never share a stream.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    std::uint64_t state = master ^ fnv1a64(tag);
    splitmix64(state);
    return splitmix64(state);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index) {
    std::uint64_t state = derive_seed(master, tag) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    return splitmix64(state);
}

// mt19937_64 wrapper with hand-rolled sampling. std:: distributions are
// implementation-defined, so results would not reproduce across standard
// libraries; these do.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // in [0, n), unbiased via rejection
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r;
        do {
            r = next_u64();
        } while (r >= limit);
        return r % n;
    }

    // Box-Muller; the sine companion is discarded to keep the stream stateless.
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double gaussian(double mu, double sigma) { return mu + sigma * gaussian(); }

    // Gaussian conditioned on z > 0, by rejection.
    double truncated_positive_gaussian(double mu, double sigma) {
        if (sigma == 0.0) return mu;
        double z;
        do {
            z = gaussian(mu, sigma);
        } while (z <= 0.0);
        return z;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    std::vector<int> permutation(int n) {
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx);
        return idx;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace exitaudit
