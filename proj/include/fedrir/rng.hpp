#ifndef FEDRIR_RNG_HPP
#define FEDRIR_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

namespace fedrir {

// Counter-based seed splitting: a master seed plus a stream label and up to
// two counters (round, client id) derive an independent engine seed. All
// sampling helpers are hand-rolled on top of mt19937_64 so that results do
// not depend on the standard library's distribution implementations.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, std::string_view tag,
                            uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the tag
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    uint64_t s = splitmix64(master ^ h);
    s = splitmix64(s ^ splitmix64(a ^ 0xa5a5a5a5a5a5a5a5ULL));
    s = splitmix64(s ^ splitmix64(b ^ 0x5a5a5a5a5a5a5a5aULL));
    return s;
}

class RngStream {
  public:
    explicit RngStream(uint64_t seed) : eng_(seed) {}

    static RngStream derive(uint64_t master, std::string_view tag,
                            uint64_t a = 0, uint64_t b = 0) {
        return RngStream(derive_seed(master, tag, a, b));
    }

    uint64_t next_u64() { return eng_(); }

    // [0, 1) with 53 random bits
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n) unbiased via rejection
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = eng_();
        } while (v >= limit);
        return v % n;
    }

    // Box-Muller, one value per call (second value discarded for a
    // call-count-independent stream position)
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    // Marsaglia-Tsang; alpha < 1 handled with the u^(1/alpha) boost
    double gamma(double alpha) {
        if (alpha < 1.0) {
            const double u = std::max(uniform(), 1e-300);
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
                return d * v;
        }
    }

    std::vector<double> dirichlet(double alpha, std::size_t n) {
        std::vector<double> p(n);
        double total = 0.0;
        for (auto& v : p) {
            v = std::max(gamma(alpha), 1e-300);
            total += v;
        }
        for (auto& v : p) v /= total;
        return p;
    }

    // Fisher-Yates
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_int(i)]);
        }
    }

  private:
    std::mt19937_64 eng_;
};

}  // namespace fedrir

#endif  // FEDRIR_RNG_HPP
