#ifndef FEAL_EVIDENTIAL_HPP
#define FEAL_EVIDENTIAL_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "feal/numerics.hpp"

namespace feal {

/// Dirichlet over categorical predictions for one sample. Evidence is
/// alpha - 1 and strength is the sum of alpha.
class DirichletPosterior {
public:
    DirichletPosterior() = default;

    explicit DirichletPosterior(std::vector<double> alpha) : alpha_(std::move(alpha)) {
        if (alpha_.size() < 2) {
            throw std::invalid_argument("DirichletPosterior: need at least two classes");
        }
        strength_ = 0.0;
        for (double a : alpha_) {
            if (!(a > 0.0) || !std::isfinite(a)) {
                throw std::domain_error("DirichletPosterior: concentration must be positive");
            }
            strength_ += a;
        }
    }

    std::size_t classes() const { return alpha_.size(); }
    std::span<const double> alpha() const { return alpha_; }
    double alpha(std::size_t c) const { return alpha_[c]; }
    double strength() const { return strength_; }
    double evidence(std::size_t c) const { return alpha_[c] - 1.0; }

private:
    std::vector<double> alpha_;
    double strength_ = 0.0;
};

/// ReLU evidence: alpha_c = max(0, z_c) + 1.
inline DirichletPosterior alpha_from_logits(std::span<const double> logits) {
    if (logits.size() < 2) {
        throw std::invalid_argument("alpha_from_logits: need at least two logits");
    }
    std::vector<double> alpha(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c) {
        if (!std::isfinite(logits[c])) {
            throw std::domain_error("alpha_from_logits: non-finite logit");
        }
        alpha[c] = std::max(0.0, logits[c]) + 1.0;
    }
    return DirichletPosterior(std::move(alpha));
}

/// Expected categorical prediction alpha / S.
inline std::vector<double> posterior(const DirichletPosterior& d) {
    std::vector<double> p(d.classes());
    for (std::size_t c = 0; c < p.size(); ++c) {
        p[c] = d.alpha(c) / d.strength();
    }
    return p;
}

/// Expected Shannon entropy of the categorical under the Dirichlet.
inline double aleatoric_uncertainty(const DirichletPosterior& d) {
    const double s = d.strength();
    const double psi_s1 = digamma(s + 1.0);
    double u = 0.0;
    for (double a : d.alpha()) {
        u += (a / s) * (psi_s1 - digamma(a + 1.0));
    }
    return u;
}

inline double log_multivariate_beta(std::span<const double> alpha) {
    double s = 0.0;
    double acc = 0.0;
    for (double a : alpha) {
        acc += ln_gamma(a);
        s += a;
    }
    return acc - ln_gamma(s);
}

enum class EntropyForm {
    /// ln B(alpha) + (S - C) psi(S) - sum (alpha_c - 1) psi(alpha_c)
    standard,
    /// The variant with ln Gamma(S) repeated once per class inside the sum.
    per_class_gamma,
};

/// Differential entropy of the Dirichlet (may be negative).
inline double epistemic_uncertainty(const DirichletPosterior& d,
                                    EntropyForm form = EntropyForm::standard) {
    const double s = d.strength();
    const double k = static_cast<double>(d.classes());
    const double psi_s = digamma(s);
    double lnb = log_multivariate_beta(d.alpha());
    if (form == EntropyForm::per_class_gamma) {
        lnb -= (k - 1.0) * ln_gamma(s);
    }
    double h = lnb + (s - k) * psi_s;
    for (double a : d.alpha()) {
        h -= (a - 1.0) * digamma(a);
    }
    return h;
}

struct UncertaintyTriple {
    double ale_global;
    double ale_local;
    double epi_global;
    double calibrated;
};

struct CalibrationOptions {
    EntropyForm entropy_form = EntropyForm::standard;
    /// Added to the epistemic term before it multiplies the aleatoric sum.
    double epi_shift = 0.0;
};

inline UncertaintyTriple calibrated_uncertainty(const DirichletPosterior& global,
                                                const DirichletPosterior& local,
                                                const CalibrationOptions& opts = {}) {
    if (global.classes() != local.classes()) {
        throw std::invalid_argument("calibrated_uncertainty: class count mismatch");
    }
    UncertaintyTriple t{};
    t.ale_global = aleatoric_uncertainty(global);
    t.ale_local = aleatoric_uncertainty(local);
    t.epi_global = epistemic_uncertainty(global, opts.entropy_form);
    t.calibrated = (t.ale_global + t.ale_local) * (t.epi_global + opts.epi_shift);
    return t;
}

/// Log of the Dirichlet density at a point of the open simplex.
inline double dirichlet_log_density(const DirichletPosterior& d, std::span<const double> rho) {
    if (rho.size() != d.classes()) {
        throw std::invalid_argument("dirichlet_log_density: dimension mismatch");
    }
    double lp = -log_multivariate_beta(d.alpha());
    for (std::size_t c = 0; c < rho.size(); ++c) {
        lp += (d.alpha(c) - 1.0) * std::log(rho[c]);
    }
    return lp;
}

struct SimplexPoint {
    std::array<double, 3> barycentric;
    double density;
};

/// Density on the 2-simplex at the centroids of a regular triangulation with
/// `resolution` subdivisions per edge. Each of the resolution^2 cells has area
/// 1 / (2 resolution^2) in (rho_1, rho_2) coordinates.
inline std::vector<SimplexPoint> dirichlet_density_grid(const DirichletPosterior& d,
                                                        int resolution) {
    if (d.classes() != 3) {
        throw std::invalid_argument("dirichlet_density_grid: only three classes are supported");
    }
    if (resolution < 2) {
        throw std::invalid_argument("dirichlet_density_grid: resolution must be at least 2");
    }
    const double r = resolution;
    std::vector<SimplexPoint> out;
    out.reserve(static_cast<std::size_t>(resolution) * resolution);
    auto push = [&](double u, double v) {
        std::array<double, 3> b{u / r, v / r, 1.0 - (u + v) / r};
        out.push_back({b, std::exp(dirichlet_log_density(d, b))});
    };
    for (int i = 0; i < resolution; ++i) {
        for (int j = 0; i + j < resolution; ++j) {
            // upward cell (i,j),(i+1,j),(i,j+1)
            push(i + 1.0 / 3.0, j + 1.0 / 3.0);
            if (i + j + 2 <= resolution) {
                // downward cell (i+1,j),(i,j+1),(i+1,j+1)
                push(i + 2.0 / 3.0, j + 2.0 / 3.0);
            }
        }
    }
    return out;
}

inline double simplex_cell_area(int resolution) {
    return 1.0 / (2.0 * static_cast<double>(resolution) * resolution);
}

inline void write_density_grid_csv(std::ostream& os, std::span<const SimplexPoint> grid) {
    os << "b1,b2,b3,density\n";
    char buf[64];
    for (const auto& p : grid) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,", p.barycentric[0], p.barycentric[1],
                      p.barycentric[2]);
        os << buf;
        std::snprintf(buf, sizeof buf, "%.10g\n", p.density);
        os << buf;
    }
}

/// Shannon entropy of a probability vector, with 0 log 0 = 0.
inline double shannon_entropy(std::span<const double> p) {
    double h = 0.0;
    for (double x : p) {
        if (x > 0.0) {
            h -= x * std::log(x);
        }
    }
    return h;
}

}  // namespace feal

#endif  // FEAL_EVIDENTIAL_HPP
