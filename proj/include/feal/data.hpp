#ifndef FEAL_DATA_HPP
#define FEAL_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "feal/nn.hpp"
#include "feal/numerics.hpp"

namespace feal {

/// Per-client feature warp and label marginal.
struct DomainSpec {
    std::size_t dim = 0;
    std::vector<double> transform;  // dim x dim, row-major, invertible
    std::vector<double> offset;     // dim
    std::vector<double> label_weights;
    double noise_scale = 1.0;
    std::size_t sample_count = 0;

    std::vector<double> apply(std::span<const double> x) const {
        std::vector<double> y(offset);
        for (std::size_t r = 0; r < dim; ++r) {
            for (std::size_t c = 0; c < dim; ++c) {
                y[r] += transform[r * dim + c] * x[c];
            }
        }
        return y;
    }
};

/// One client's data. An item is a single feature vector (classification) or
/// a grid of `cells` feature vectors with per-cell labels (segmentation).
struct Partition {
    std::size_t dim = 0;
    std::size_t classes = 0;
    std::size_t cells = 1;
    std::vector<double> features;  // items x cells x dim
    std::vector<int> labels;       // items x cells
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;

    std::size_t items() const { return labels.size() / cells; }

    std::span<const double> cell_features(std::size_t item, std::size_t cell) const {
        return std::span<const double>(features).subspan((item * cells + cell) * dim, dim);
    }
    std::span<const int> item_labels(std::size_t item) const {
        return std::span<const int>(labels).subspan(item * cells, cells);
    }
    /// Labels of one item as an M x C one-hot matrix.
    std::vector<double> one_hot_labels(std::size_t item) const {
        std::vector<double> y(cells * classes, 0.0);
        auto l = item_labels(item);
        for (std::size_t m = 0; m < cells; ++m) {
            y[m * classes + static_cast<std::size_t>(l[m])] = 1.0;
        }
        return y;
    }
};

struct GeneratorConfig {
    std::size_t clients = 4;
    std::size_t classes = 3;
    std::size_t dim = 16;
    double shift_strength = 1.0;
    std::size_t samples_per_client = 500;
    std::size_t modes_per_class = 3;
    double class_separation = 1.6;
    double noise = 1.0;
    /// Relative frequency of the rarest class in the shared label marginal.
    double class_imbalance = 0.35;
    std::uint64_t seed = 1;
};

struct MultiDomainData {
    std::vector<DomainSpec> domains;
    std::vector<Partition> partitions;
};

namespace detail {

inline void validate(const GeneratorConfig& g) {
    if (g.clients < 2 || g.classes < 2 || g.dim < 2) {
        throw std::invalid_argument("generate_multidomain: need clients >= 2, classes >= 2, dim >= 2");
    }
    if (g.samples_per_client < 10) {
        throw std::invalid_argument("generate_multidomain: need at least 10 samples per client");
    }
    if (!(g.shift_strength >= 0.0) || g.modes_per_class == 0) {
        throw std::invalid_argument("generate_multidomain: invalid shift or mode count");
    }
    if (!(g.class_imbalance > 0.0 && g.class_imbalance <= 1.0)) {
        throw std::invalid_argument("generate_multidomain: class_imbalance must be in (0, 1]");
    }
}

// Product of Givens rotations times a diagonal scaling; deviation from the
// identity grows with `strength`.
inline std::vector<double> random_warp(std::size_t dim, double strength, Rng& rng) {
    std::vector<double> m(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) {
        m[i * dim + i] = std::exp(strength * rng.uniform(-0.4, 0.4));
    }
    const std::size_t rotations = dim;
    for (std::size_t k = 0; k < rotations; ++k) {
        const std::size_t a = rng.below(dim);
        std::size_t b = rng.below(dim - 1);
        if (b >= a) {
            ++b;
        }
        const double theta = strength * rng.uniform(-0.8, 0.8);
        const double cs = std::cos(theta);
        const double sn = std::sin(theta);
        for (std::size_t c = 0; c < dim; ++c) {
            const double ra = m[a * dim + c];
            const double rb = m[b * dim + c];
            m[a * dim + c] = cs * ra - sn * rb;
            m[b * dim + c] = sn * ra + cs * rb;
        }
    }
    return m;
}

inline std::vector<std::size_t> split_indices(std::size_t n, Rng& rng,
                                              std::vector<std::size_t>& test) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = i;
    }
    rng.shuffle(idx);
    const std::size_t n_train = (n * 8 + 5) / 10;
    std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return train;
}

inline std::size_t draw_category(std::span<const double> weights, Rng& rng) {
    double u = rng.uniform();
    for (std::size_t c = 0; c + 1 < weights.size(); ++c) {
        if (u < weights[c]) {
            return c;
        }
        u -= weights[c];
    }
    return weights.size() - 1;
}

inline constexpr double kSeveritySpread = 0.8;

struct ClassStructure {
    std::size_t classes = 0;
    std::size_t modes = 0;
    std::size_t dim = 0;
    std::vector<double> means;  // (class * modes + mode) x dim
    std::vector<double> base_weights;

    std::span<const double> mean(std::size_t c, std::size_t j) const {
        return std::span<const double>(means).subspan((c * modes + j) * dim, dim);
    }
};

inline ClassStructure make_class_structure(const GeneratorConfig& g, Rng& rng) {
    ClassStructure s;
    s.classes = g.classes;
    s.modes = g.modes_per_class;
    s.dim = g.dim;
    s.means.resize(g.classes * g.modes_per_class * g.dim);
    for (auto& v : s.means) {
        v = g.class_separation * rng.normal();
    }
    // geometric decay from 1 down to class_imbalance
    s.base_weights.resize(g.classes);
    double total = 0.0;
    for (std::size_t c = 0; c < g.classes; ++c) {
        const double t = g.classes == 1 ? 0.0 : static_cast<double>(c) / (g.classes - 1);
        s.base_weights[c] = std::pow(g.class_imbalance, t);
        total += s.base_weights[c];
    }
    for (auto& w : s.base_weights) {
        w /= total;
    }
    return s;
}

// Clients sit at evenly spaced severities in [-1/2, 1/2] so that no two
// domains coincide by chance; severity scales both the feature gain and the
// noise level.
inline DomainSpec make_domain(const GeneratorConfig& g, const ClassStructure& s, std::size_t client,
                              Rng& rng) {
    DomainSpec d;
    d.dim = g.dim;
    d.sample_count = g.samples_per_client;
    d.transform = random_warp(g.dim, g.shift_strength, rng);
    d.offset.resize(g.dim);
    for (auto& v : d.offset) {
        v = g.shift_strength * 1.5 * rng.normal();
    }
    const double severity = static_cast<double>(client) / static_cast<double>(g.clients - 1) - 0.5;
    const double level = std::exp(g.shift_strength * kSeveritySpread * severity);
    d.noise_scale = g.noise * level;
    for (auto& v : d.transform) {
        v *= level;
    }
    d.label_weights.resize(g.classes);
    double total = 0.0;
    for (std::size_t c = 0; c < g.classes; ++c) {
        const double skew = std::exp(g.shift_strength * rng.uniform(-0.5, 0.5));
        d.label_weights[c] = s.base_weights[c] * skew;
        total += d.label_weights[c];
    }
    for (auto& w : d.label_weights) {
        w /= total;
    }
    return d;
}

inline std::vector<double> draw_feature(const ClassStructure& s, const DomainSpec& d,
                                        std::size_t label, Rng& rng) {
    const auto mode = rng.below(s.modes);
    auto mu = s.mean(label, mode);
    std::vector<double> x(s.dim);
    for (std::size_t i = 0; i < s.dim; ++i) {
        x[i] = mu[i] + d.noise_scale * rng.normal();
    }
    return d.apply(x);
}

}  // namespace detail

/// Class-conditional Gaussian mixtures shared by all clients, each client's
/// features warped by its own affine DomainSpec. 8:2 train/test split.
inline MultiDomainData generate_multidomain(const GeneratorConfig& g) {
    detail::validate(g);
    Rng structure_rng(derive_seed(g.seed, 0));
    const auto structure = detail::make_class_structure(g, structure_rng);
    MultiDomainData out;
    for (std::size_t k = 0; k < g.clients; ++k) {
        Rng domain_rng(derive_seed(g.seed, 100 + k));
        Rng sample_rng(derive_seed(g.seed, 200 + k));
        Rng split_rng(derive_seed(g.seed, 300 + k));
        DomainSpec d = detail::make_domain(g, structure, k, domain_rng);
        Partition p;
        p.dim = g.dim;
        p.classes = g.classes;
        p.cells = 1;
        p.features.reserve(g.samples_per_client * g.dim);
        for (std::size_t i = 0; i < g.samples_per_client; ++i) {
            const auto label = detail::draw_category(d.label_weights, sample_rng);
            const auto x = detail::draw_feature(structure, d, label, sample_rng);
            p.features.insert(p.features.end(), x.begin(), x.end());
            p.labels.push_back(static_cast<int>(label));
        }
        p.train = detail::split_indices(g.samples_per_client, split_rng, p.test);
        out.domains.push_back(std::move(d));
        out.partitions.push_back(std::move(p));
    }
    return out;
}

inline constexpr std::size_t kSegmentationSide = 16;

/// Toy segmentation: each item is a 16 x 16 grid whose cells are labeled 1
/// inside a planted disc and 0 elsewhere; cell features follow the same
/// class-conditional mixture and client warp as classification data.
inline MultiDomainData generate_segmentation(GeneratorConfig g) {
    g.classes = 2;
    detail::validate(g);
    Rng structure_rng(derive_seed(g.seed, 0));
    auto structure = detail::make_class_structure(g, structure_rng);
    const std::size_t side = kSegmentationSide;
    MultiDomainData out;
    for (std::size_t k = 0; k < g.clients; ++k) {
        Rng domain_rng(derive_seed(g.seed, 100 + k));
        Rng sample_rng(derive_seed(g.seed, 200 + k));
        Rng split_rng(derive_seed(g.seed, 300 + k));
        DomainSpec d = detail::make_domain(g, structure, k, domain_rng);
        Partition p;
        p.dim = g.dim;
        p.classes = 2;
        p.cells = side * side;
        for (std::size_t i = 0; i < g.samples_per_client; ++i) {
            const double cx = sample_rng.uniform(3.0, side - 3.0);
            const double cy = sample_rng.uniform(3.0, side - 3.0);
            const double radius = sample_rng.uniform(2.0, 5.0);
            for (std::size_t r = 0; r < side; ++r) {
                for (std::size_t c = 0; c < side; ++c) {
                    const double dx = static_cast<double>(c) + 0.5 - cx;
                    const double dy = static_cast<double>(r) + 0.5 - cy;
                    const std::size_t label = dx * dx + dy * dy <= radius * radius ? 1 : 0;
                    const auto x = detail::draw_feature(structure, d, label, sample_rng);
                    p.features.insert(p.features.end(), x.begin(), x.end());
                    p.labels.push_back(static_cast<int>(label));
                }
            }
        }
        p.train = detail::split_indices(g.samples_per_client, split_rng, p.test);
        out.domains.push_back(std::move(d));
        out.partitions.push_back(std::move(p));
    }
    return out;
}

/// -log sum_c exp(z_c), stabilized.
inline double energy_score(std::span<const double> logits) {
    return -log_sum_exp(logits);
}

/// Energy score of every item (cell mean for segmentation items).
inline std::vector<double> energy_scores(const ModelParams& p, const Partition& part) {
    std::vector<double> e(part.items());
    for (std::size_t i = 0; i < part.items(); ++i) {
        double acc = 0.0;
        for (std::size_t m = 0; m < part.cells; ++m) {
            acc += energy_score(forward(p, part.cell_features(i, m)).logits);
        }
        e[i] = acc / static_cast<double>(part.cells);
    }
    return e;
}

/// K x K matrix (row-major) of KS p-values between clients' energy scores.
/// The diagonal compares two disjoint halves (even/odd items) of one client.
inline std::vector<double> domain_shift_report(std::span<const Partition> parts,
                                               const ModelParams& p) {
    const std::size_t k = parts.size();
    std::vector<std::vector<double>> energies;
    for (const auto& part : parts) {
        if (part.items() < 10) {
            throw std::invalid_argument("domain_shift_report: each partition needs at least 10 items");
        }
        energies.push_back(energy_scores(p, part));
    }
    std::vector<double> m(k * k, 1.0);
    for (std::size_t i = 0; i < k; ++i) {
        std::vector<double> even;
        std::vector<double> odd;
        for (std::size_t j = 0; j < energies[i].size(); ++j) {
            (j % 2 == 0 ? even : odd).push_back(energies[i][j]);
        }
        m[i * k + i] = ks_two_sample(even, odd).p_value;
        for (std::size_t j = i + 1; j < k; ++j) {
            const double pv = ks_two_sample(energies[i], energies[j]).p_value;
            m[i * k + j] = pv;
            m[j * k + i] = pv;
        }
    }
    return m;
}

struct KdeCurve {
    std::vector<double> x;
    std::vector<double> density;
};

/// Gaussian-kernel density estimate with Silverman's bandwidth.
inline KdeCurve gaussian_kde(std::span<const double> samples, std::span<const double> grid) {
    if (samples.size() < 2) {
        throw std::invalid_argument("gaussian_kde: need at least two samples");
    }
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(sorted.size() - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const auto hi = std::min(lo + 1, sorted.size() - 1);
        return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    const double sd = stddev(samples);
    const double iqr = quantile(0.75) - quantile(0.25);
    double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
    if (!(spread > 0.0)) {
        spread = 1.0;
    }
    const double n = static_cast<double>(samples.size());
    const double h = 0.9 * spread * std::pow(n, -0.2);
    const double norm = 1.0 / (n * h * std::sqrt(2.0 * std::numbers::pi));
    KdeCurve curve;
    curve.x.assign(grid.begin(), grid.end());
    for (double x : grid) {
        double acc = 0.0;
        for (double s : samples) {
            const double u = (x - s) / h;
            acc += std::exp(-0.5 * u * u);
        }
        curve.density.push_back(acc * norm);
    }
    return curve;
}

/// Writes `split,label,f1..fD`; segmentation items emit one row per cell.
inline void write_partition_csv(std::ostream& os, const Partition& p) {
    os << "split,label";
    for (std::size_t d = 0; d < p.dim; ++d) {
        os << ",f" << (d + 1);
    }
    os << '\n';
    std::vector<const char*> split(p.items(), "train");
    for (auto i : p.test) {
        split[i] = "test";
    }
    char buf[32];
    for (std::size_t i = 0; i < p.items(); ++i) {
        for (std::size_t m = 0; m < p.cells; ++m) {
            os << split[i] << ',' << p.labels[i * p.cells + m];
            for (double v : p.cell_features(i, m)) {
                std::snprintf(buf, sizeof buf, ",%.8g", v);
                os << buf;
            }
            os << '\n';
        }
    }
}

}  // namespace feal

#endif  // FEAL_DATA_HPP
