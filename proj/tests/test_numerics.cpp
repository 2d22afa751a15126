#include <gtest/gtest.h>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "feal/numerics.hpp"

using namespace feal;

namespace {

double rel_err(double got, double want) {
    return std::abs(got - want) / std::max(1.0, std::abs(want));
}

}  // namespace

TEST(SpecialFunctions, FrozenValues) {
    EXPECT_NEAR(digamma(1.0), -0.5772156649015329, 1e-12);
    EXPECT_NEAR(trigamma(1.0), std::numbers::pi * std::numbers::pi / 6.0, 1e-12);
    EXPECT_NEAR(ln_gamma(1.0), 0.0, 1e-14);
    EXPECT_NEAR(ln_gamma(2.0), 0.0, 1e-14);
    EXPECT_NEAR(ln_gamma(0.5), 0.5 * std::log(std::numbers::pi), 1e-13);
    EXPECT_NEAR(digamma(0.5), -0.5772156649015329 - 2.0 * std::log(2.0), 1e-12);
}

TEST(SpecialFunctions, MatchesBoostAcrossRange) {
    Rng rng(7);
    for (int i = 0; i < 2000; ++i) {
        // log-uniform over [1e-3, 1e4]
        const double x = std::pow(10.0, rng.uniform(-3.0, 4.0));
        EXPECT_LT(rel_err(ln_gamma(x), boost::math::lgamma(x)), 1e-12) << x;
        EXPECT_LT(rel_err(digamma(x), boost::math::digamma(x)), 1e-12) << x;
        EXPECT_LT(rel_err(trigamma(x), boost::math::trigamma(x)), 1e-12) << x;
    }
}

TEST(SpecialFunctions, RecurrenceIdentities) {
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        const double x = rng.uniform(0.5, 100.0);
        EXPECT_NEAR(digamma(x + 1.0) - digamma(x), 1.0 / x, 1e-10);
        EXPECT_NEAR(ln_gamma(x + 1.0) - ln_gamma(x), std::log(x), 1e-10);
        EXPECT_NEAR(trigamma(x) - trigamma(x + 1.0), 1.0 / (x * x), 1e-10);
    }
}

TEST(SpecialFunctions, TrigammaIsDigammaDerivative) {
    Rng rng(3);
    const double h = 1e-5;
    for (int i = 0; i < 500; ++i) {
        const double x = rng.uniform(0.2, 60.0);
        const double fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
        EXPECT_LT(std::abs(fd - trigamma(x)) / trigamma(x), 1e-5) << x;
    }
}

TEST(SpecialFunctions, RejectsNonPositiveArguments) {
    EXPECT_THROW(digamma(0.0), std::domain_error);
    EXPECT_THROW(trigamma(-1.0), std::domain_error);
    EXPECT_THROW(ln_gamma(0.0), std::domain_error);
    EXPECT_THROW(special_functions(std::nan("")), std::domain_error);
    const auto all = special_functions(2.5);
    EXPECT_DOUBLE_EQ(all.ln_gamma, ln_gamma(2.5));
    EXPECT_DOUBLE_EQ(all.digamma, digamma(2.5));
    EXPECT_DOUBLE_EQ(all.trigamma, trigamma(2.5));
}

TEST(Rng, DeterministicPerSeed) {
    Rng a(42);
    Rng b(42);
    Rng c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const double x = a.normal();
        EXPECT_EQ(x, b.normal());
        differs = differs || x != c.normal();
    }
    EXPECT_TRUE(differs);
    EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
    EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
}

TEST(Rng, BelowCoversRangeUniformly) {
    Rng rng(5);
    std::vector<int> counts(7, 0);
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        counts[rng.below(7)]++;
    }
    for (int c : counts) {
        EXPECT_NEAR(c, n / 7.0, 5.0 * std::sqrt(n / 7.0));
    }
    EXPECT_THROW(rng.below(0), std::invalid_argument);
}

TEST(Rng, GammaMoments) {
    Rng rng(9);
    for (double shape : {0.3, 1.0, 4.5, 40.0}) {
        const int n = 200000;
        double s = 0.0;
        double s2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double g = rng.gamma_variate(shape);
            s += g;
            s2 += g * g;
        }
        const double m = s / n;
        const double var = s2 / n - m * m;
        EXPECT_NEAR(m, shape, 5.0 * std::sqrt(shape / n)) << shape;
        EXPECT_NEAR(var / shape, 1.0, 0.05) << shape;
    }
    EXPECT_THROW(rng.gamma_variate(0.0), std::domain_error);
}

TEST(Dirichlet, SamplesLieOnSimplex) {
    Rng rng(17);
    for (int t = 0; t < 200; ++t) {
        const std::size_t k = 2 + rng.below(9);
        std::vector<double> alpha(k);
        for (auto& a : alpha) {
            a = std::pow(10.0, rng.uniform(-2.0, 2.0));
        }
        const auto x = dirichlet_sample(alpha, rng);
        double s = 0.0;
        for (double v : x) {
            // a tiny concentration can push a coordinate to exactly 1.0 in double
            EXPECT_GT(v, 0.0);
            EXPECT_LE(v, 1.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Dirichlet, SampleMeanMatchesAlphaOverStrength) {
    Rng rng(23);
    const std::vector<double> alpha{0.7, 3.0, 12.0};
    const double s = 15.7;
    const int n = 1000000;
    std::vector<double> acc(3, 0.0);
    for (int i = 0; i < n; ++i) {
        const auto x = dirichlet_sample(alpha, rng);
        for (int c = 0; c < 3; ++c) {
            acc[c] += x[c];
        }
    }
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(acc[c] / n, alpha[c] / s, 0.005);
    }
}

TEST(Dirichlet, RejectsBadConcentration) {
    Rng rng(1);
    EXPECT_THROW(dirichlet_sample(std::vector<double>{1.0, 0.0}, rng), std::domain_error);
    EXPECT_THROW(dirichlet_sample(std::vector<double>{}, rng), std::domain_error);
    EXPECT_THROW(dirichlet_sample(std::vector<double>{1.0, -2.0}, rng), std::domain_error);
}

TEST(LogSumExp, StableAndExact) {
    Rng rng(31);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> v(10);
        for (auto& x : v) {
            x = rng.uniform(-20.0, 20.0);
        }
        double naive = 0.0;
        for (double x : v) {
            naive += std::exp(x);
        }
        EXPECT_NEAR(log_sum_exp(v), std::log(naive), 1e-12 * std::max(1.0, std::log(naive)));
    }
    EXPECT_NEAR(log_sum_exp(std::vector<double>{1000.0, 1000.0}), 1000.0 + std::log(2.0), 1e-9);
}

// Exact two-sample KS p-value by counting lattice paths (no ties), used as an
// oracle for the corrected asymptotic approximation on moderate samples.
namespace {

double exact_ks_pvalue(std::size_t n, std::size_t m, double d) {
    // P(D >= d) = 1 - P(all |i/n - j/m| < d along the path)
    const double nm = static_cast<double>(n) * static_cast<double>(m);
    const double tol = 1e-12;
    auto inside = [&](std::size_t i, std::size_t j) {
        return std::abs(static_cast<double>(i) * m - static_cast<double>(j) * n) < d * nm - tol;
    };
    // p[i][j]: probability a uniformly random monotone path reaches (i, j) inside the band
    std::vector<std::vector<double>> p(n + 1, std::vector<double>(m + 1, 0.0));
    p[0][0] = 1.0;
    for (std::size_t i = 0; i <= n; ++i) {
        for (std::size_t j = 0; j <= m; ++j) {
            if (i == 0 && j == 0) {
                continue;
            }
            if (!inside(i, j)) {
                p[i][j] = 0.0;
                continue;
            }
            const double rem = static_cast<double>(i + j);
            double v = 0.0;
            if (i > 0) v += p[i - 1][j] * static_cast<double>(i) / rem;
            if (j > 0) v += p[i][j - 1] * static_cast<double>(j) / rem;
            p[i][j] = v;
        }
    }
    return 1.0 - p[n][m];
}

}  // namespace

TEST(KolmogorovSmirnov, StatisticMatchesBruteForce) {
    Rng rng(41);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> a(30 + rng.below(20));
        std::vector<double> b(25 + rng.below(30));
        for (auto& x : a) x = rng.normal();
        for (auto& x : b) x = rng.normal(0.3, 1.2);
        double d = 0.0;
        std::vector<double> pts(a);
        pts.insert(pts.end(), b.begin(), b.end());
        for (double x : pts) {
            const double fa = static_cast<double>(std::count_if(a.begin(), a.end(), [&](double v) { return v <= x; })) / a.size();
            const double fb = static_cast<double>(std::count_if(b.begin(), b.end(), [&](double v) { return v <= x; })) / b.size();
            d = std::max(d, std::abs(fa - fb));
        }
        EXPECT_NEAR(ks_two_sample(a, b).statistic, d, 1e-15);
    }
}

TEST(KolmogorovSmirnov, AsymptoticPValueTracksExact) {
    Rng rng(43);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> a(200);
        std::vector<double> b(180);
        for (auto& x : a) x = rng.normal();
        for (auto& x : b) x = rng.normal(0.15, 1.0);
        const auto r = ks_two_sample(a, b);
        const double exact = exact_ks_pvalue(a.size(), b.size(), r.statistic);
        EXPECT_NEAR(r.p_value, exact, 0.03) << r.statistic;
    }
}

TEST(KolmogorovSmirnov, KnownSurvivalValues) {
    // Kolmogorov distribution: P(K > 1.3581) ~= 0.05, P(K > 1.6276) ~= 0.01
    EXPECT_NEAR(kolmogorov_survival(1.3581), 0.05, 2e-4);
    EXPECT_NEAR(kolmogorov_survival(1.6276), 0.01, 1e-4);
    EXPECT_NEAR(kolmogorov_survival(0.5), 0.9639452436648751, 1e-9);
    // the two series agree where they switch over
    EXPECT_NEAR(kolmogorov_survival(1.18 - 1e-12), kolmogorov_survival(1.18), 1e-9);
    EXPECT_DOUBLE_EQ(kolmogorov_survival(0.0), 1.0);
}

TEST(KolmogorovSmirnov, IdenticalAndDisjointSamples) {
    std::vector<double> a{1, 2, 3, 4, 5, 6};
    EXPECT_DOUBLE_EQ(ks_two_sample(a, a).statistic, 0.0);
    EXPECT_DOUBLE_EQ(ks_two_sample(a, a).p_value, 1.0);
    std::vector<double> b{10, 11, 12, 13, 14, 15};
    EXPECT_DOUBLE_EQ(ks_two_sample(a, b).statistic, 1.0);
    EXPECT_LT(ks_two_sample(a, b).p_value, 0.01);
    EXPECT_THROW(ks_two_sample(std::vector<double>{1, 2, 3, 4}, b), std::invalid_argument);
}

TEST(Summary, MeanAndSampleStddev) {
    std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
    EXPECT_DOUBLE_EQ(mean(v), 5.0);
    EXPECT_NEAR(stddev(v), std::sqrt(32.0 / 7.0), 1e-15);
    EXPECT_DOUBLE_EQ(stddev(std::vector<double>{3.0}), 0.0);
}
