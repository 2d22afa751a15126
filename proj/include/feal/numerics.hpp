#ifndef FEAL_NUMERICS_HPP
#define FEAL_NUMERICS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace feal {

/// Log-gamma, digamma and trigamma evaluated at the same point.
struct PolygammaResult {
    double ln_gamma;
    double digamma;
    double trigamma;
};

namespace detail {

inline void require_positive(double x, const char* who) {
    if (!(x > 0.0) || !std::isfinite(x)) {
        throw std::domain_error(std::string(who) + ": argument must be positive and finite");
    }
}

// Lanczos approximation, g = 7, nine coefficients.
inline constexpr double kLanczosG = 7.0;
inline constexpr std::array<double, 9> kLanczosCoef = {
    0.99999999999980993,     676.5203681218851,     -1259.1392167224028,
    771.32342877765313,      -176.61502916214059,   12.507343278686905,
    -0.13857109526572012,    9.9843695780195716e-6, 1.5056327351493116e-7};

inline double ln_gamma_lanczos(double x) {
    // valid for x >= 0.5
    x -= 1.0;
    double a = kLanczosCoef[0];
    for (std::size_t i = 1; i < kLanczosCoef.size(); ++i) {
        a += kLanczosCoef[i] / (x + static_cast<double>(i));
    }
    const double t = x + kLanczosG + 0.5;
    return 0.5 * std::log(2.0 * std::numbers::pi) + (x + 0.5) * std::log(t) - t + std::log(a);
}

inline constexpr double kAsymptoticThreshold = 6.0;

}  // namespace detail

inline double ln_gamma(double x) {
    detail::require_positive(x, "ln_gamma");
    if (x < 0.5) {
        // reflection; sin(pi x) > 0 on (0, 0.5)
        return std::log(std::numbers::pi / std::sin(std::numbers::pi * x)) -
               detail::ln_gamma_lanczos(1.0 - x);
    }
    return detail::ln_gamma_lanczos(x);
}

inline double digamma(double x) {
    detail::require_positive(x, "digamma");
    double shift = 0.0;
    while (x < detail::kAsymptoticThreshold) {
        shift -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // Bernoulli tail: -sum B_2k / (2k x^2k)
    const double tail =
        inv2 * (1.0 / 12 -
                inv2 * (1.0 / 120 -
                        inv2 * (1.0 / 252 -
                                inv2 * (1.0 / 240 -
                                        inv2 * (1.0 / 132 -
                                                inv2 * (691.0 / 32760 - inv2 * (1.0 / 12)))))));
    return shift + std::log(x) - 0.5 * inv - tail;
}

inline double trigamma(double x) {
    detail::require_positive(x, "trigamma");
    double shift = 0.0;
    while (x < detail::kAsymptoticThreshold) {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    const double series =
        inv + 0.5 * inv2 +
        inv * inv2 *
            (1.0 / 6 -
             inv2 * (1.0 / 30 -
                     inv2 * (1.0 / 42 -
                             inv2 * (1.0 / 30 -
                                     inv2 * (5.0 / 66 - inv2 * (691.0 / 2730 - inv2 * (7.0 / 6)))))));
    return shift + series;
}

inline PolygammaResult special_functions(double x) {
    detail::require_positive(x, "special_functions");
    return {ln_gamma(x), digamma(x), trigamma(x)};
}

/// Seeded generator passed around by value. Draw routines are written out
/// explicitly so sequences do not depend on the standard library's
/// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1).
    double uniform_open() {
        double u = 0.0;
        while (u == 0.0) {
            u = uniform();
        }
        return u;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) {
            throw std::invalid_argument("Rng::below: n must be positive");
        }
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v = engine_();
        while (v >= limit) {
            v = engine_();
        }
        return v % n;
    }

    /// Standard normal via the polar method.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = 0.0;
        double v = 0.0;
        double s = 0.0;
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

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Log of a Gamma(shape, 1) variate (Marsaglia-Tsang). Working in log
    /// space keeps tiny shapes from underflowing to zero.
    double log_gamma_variate(double shape) {
        if (!(shape > 0.0) || !std::isfinite(shape)) {
            throw std::domain_error("gamma variate: shape must be positive");
        }
        if (shape < 1.0) {
            // G(a) = G(a + 1) * U^(1/a)
            return log_gamma_variate(shape + 1.0) + std::log(uniform_open()) / shape;
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = 0.0;
            double v = 0.0;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform_open();
            const double x2 = x * x;
            if (u < 1.0 - 0.0331 * x2 * x2) {
                return std::log(d * v);
            }
            if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) {
                return std::log(d * v);
            }
        }
    }

    double gamma_variate(double shape) { return std::exp(log_gamma_variate(shape)); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Derive an independent stream seed from a base seed and a tag (splitmix64).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline double log_sum_exp(std::span<const double> v) {
    if (v.empty()) {
        return -std::numeric_limits<double>::infinity();
    }
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) {
        return m;
    }
    double s = 0.0;
    for (double x : v) {
        s += std::exp(x - m);
    }
    return m + std::log(s);
}

/// One draw from Dir(alpha): normalized Gamma variates, normalized in log space.
inline std::vector<double> dirichlet_sample(std::span<const double> alpha, Rng& rng) {
    if (alpha.empty()) {
        throw std::domain_error("dirichlet_sample: empty concentration");
    }
    std::vector<double> logs(alpha.size());
    for (std::size_t c = 0; c < alpha.size(); ++c) {
        if (!(alpha[c] > 0.0) || !std::isfinite(alpha[c])) {
            throw std::domain_error("dirichlet_sample: concentration entries must be positive");
        }
        logs[c] = rng.log_gamma_variate(alpha[c]);
    }
    const double lse = log_sum_exp(logs);
    std::vector<double> out(alpha.size());
    for (std::size_t c = 0; c < alpha.size(); ++c) {
        out[c] = std::max(std::exp(logs[c] - lse), std::numeric_limits<double>::min());
    }
    return out;
}

struct KsResult {
    double statistic;
    double p_value;
};

/// Survival function of the Kolmogorov distribution, P(K > lambda).
inline double kolmogorov_survival(double lambda) {
    if (lambda <= 0.0) {
        return 1.0;
    }
    if (lambda < 1.18) {
        // CDF = sqrt(2 pi)/lambda * sum exp(-(2k-1)^2 pi^2 / (8 lambda^2))
        const double pi2 = std::numbers::pi * std::numbers::pi;
        double cdf = 0.0;
        for (int k = 1; k <= 20; ++k) {
            const double j = 2.0 * k - 1.0;
            cdf += std::exp(-j * j * pi2 / (8.0 * lambda * lambda));
        }
        cdf *= std::sqrt(2.0 * std::numbers::pi) / lambda;
        return std::clamp(1.0 - cdf, 0.0, 1.0);
    }
    double sum = 0.0;
    for (int k = 1; k <= 100; ++k) {
        const double term = std::exp(-2.0 * k * k * lambda * lambda);
        sum += (k % 2 == 1) ? term : -term;
        if (term < 1e-300) {
            break;
        }
    }
    return std::clamp(2.0 * sum, 0.0, 1.0);
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
inline KsResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 5 || b.size() < 5) {
        throw std::invalid_argument("ks_two_sample: each sample needs at least 5 values");
    }
    std::vector<double> x(a.begin(), a.end());
    std::vector<double> y(b.begin(), b.end());
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    const double n = static_cast<double>(x.size());
    const double m = static_cast<double>(y.size());
    std::size_t i = 0;
    std::size_t j = 0;
    double d = 0.0;
    while (i < x.size() && j < y.size()) {
        const double v = std::min(x[i], y[j]);
        while (i < x.size() && x[i] == v) {
            ++i;
        }
        while (j < y.size() && y[j] == v) {
            ++j;
        }
        d = std::max(d, std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m));
    }
    // Stephens' finite-sample correction of the asymptotic argument
    const double en = std::sqrt(n * m / (n + m));
    return {d, kolmogorov_survival((en + 0.12 + 0.11 / en) * d)};
}

inline double mean(std::span<const double> v) {
    if (v.empty()) {
        return 0.0;
    }
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
inline double stddev(std::span<const double> v) {
    if (v.size() < 2) {
        return 0.0;
    }
    const double mu = mean(v);
    double s = 0.0;
    for (double x : v) {
        s += (x - mu) * (x - mu);
    }
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace feal

#endif  // FEAL_NUMERICS_HPP
