#ifndef FEAL_NN_HPP
#define FEAL_NN_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "feal/numerics.hpp"

namespace feal {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense layer, weights stored row-major as out x in.
struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weights;
    std::vector<double> bias;

    double& w(std::size_t o, std::size_t i) { return weights[o * in + i]; }
    double w(std::size_t o, std::size_t i) const { return weights[o * in + i]; }

    bool operator==(const DenseLayer&) const = default;
};

/// Multilayer perceptron with ReLU hidden layers and a linear output head.
struct ModelParams {
    std::vector<std::size_t> widths;  // input, hidden..., output
    std::vector<DenseLayer> layers;

    std::size_t input_width() const { return widths.front(); }
    std::size_t output_width() const { return widths.back(); }
    std::size_t embedding_width() const { return widths[widths.size() - 2]; }

    std::size_t flat_size() const {
        std::size_t n = 0;
        for (const auto& l : layers) {
            n += l.weights.size() + l.bias.size();
        }
        return n;
    }

    bool same_architecture(const ModelParams& other) const { return widths == other.widths; }

    std::vector<double> flatten() const {
        std::vector<double> flat;
        flat.reserve(flat_size());
        for (const auto& l : layers) {
            flat.insert(flat.end(), l.weights.begin(), l.weights.end());
            flat.insert(flat.end(), l.bias.begin(), l.bias.end());
        }
        return flat;
    }

    void assign_flat(std::span<const double> flat) {
        if (flat.size() != flat_size()) {
            throw std::invalid_argument("ModelParams: flat vector length mismatch");
        }
        std::size_t pos = 0;
        for (auto& l : layers) {
            std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), l.weights.size(),
                        l.weights.begin());
            pos += l.weights.size();
            std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), l.bias.size(),
                        l.bias.begin());
            pos += l.bias.size();
        }
    }

    bool operator==(const ModelParams&) const = default;
};

/// Zero-filled parameters for the given architecture.
inline ModelParams zero_params(const std::vector<std::size_t>& widths) {
    if (widths.size() < 3) {
        throw std::invalid_argument("zero_params: need input, at least one hidden, and output width");
    }
    for (auto w : widths) {
        if (w == 0) {
            throw std::invalid_argument("zero_params: zero-width layer");
        }
    }
    ModelParams p;
    p.widths = widths;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        DenseLayer layer;
        layer.in = widths[l];
        layer.out = widths[l + 1];
        layer.weights.assign(layer.in * layer.out, 0.0);
        layer.bias.assign(layer.out, 0.0);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

/// Glorot-uniform weights, zero biases.
inline ModelParams init_params(const std::vector<std::size_t>& widths, std::uint64_t seed) {
    ModelParams p = zero_params(widths);
    Rng rng(seed);
    for (auto& l : p.layers) {
        const double bound = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
        for (auto& w : l.weights) {
            w = rng.uniform(-bound, bound);
        }
    }
    return p;
}

struct ForwardCache {
    std::vector<std::vector<double>> activations;      // activations[0] = input
    std::vector<std::vector<double>> pre_activations;  // one per layer
    std::vector<double> logits;
    std::vector<double> embedding;  // last hidden activation
};

inline ForwardCache forward(const ModelParams& p, std::span<const double> x) {
    if (x.size() != p.input_width()) {
        throw std::invalid_argument("forward: input width mismatch");
    }
    ForwardCache cache;
    cache.activations.emplace_back(x.begin(), x.end());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& layer = p.layers[l];
        const auto& in = cache.activations.back();
        std::vector<double> z(layer.bias);
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double* row = &layer.weights[o * layer.in];
            double acc = 0.0;
            for (std::size_t i = 0; i < layer.in; ++i) {
                acc += row[i] * in[i];
            }
            z[o] += acc;
        }
        const bool hidden = l + 1 < p.layers.size();
        cache.pre_activations.push_back(z);
        if (hidden) {
            for (auto& v : z) {
                v = v > 0.0 ? v : 0.0;
            }
            cache.activations.push_back(std::move(z));
        } else {
            cache.logits = std::move(z);
        }
    }
    cache.embedding = cache.activations.back();
    return cache;
}

/// Accumulates dL/dtheta into `grad` (same architecture as p).
inline void backward_accumulate(const ModelParams& p, const ForwardCache& cache,
                                std::span<const double> grad_logits, ModelParams& grad) {
    if (cache.pre_activations.size() != p.layers.size() ||
        cache.activations.size() != p.layers.size() || grad_logits.size() != p.output_width() ||
        !grad.same_architecture(p)) {
        throw std::invalid_argument("backward: cache or gradient shape does not match params");
    }
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        if (cache.pre_activations[l].size() != p.layers[l].out ||
            cache.activations[l].size() != p.layers[l].in) {
            throw std::invalid_argument("backward: stale forward cache");
        }
    }
    std::vector<double> delta(grad_logits.begin(), grad_logits.end());
    for (std::size_t l = p.layers.size(); l-- > 0;) {
        const auto& layer = p.layers[l];
        auto& g = grad.layers[l];
        const auto& in = cache.activations[l];
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double d = delta[o];
            g.bias[o] += d;
            if (d == 0.0) {
                continue;
            }
            double* grow = &g.weights[o * layer.in];
            for (std::size_t i = 0; i < layer.in; ++i) {
                grow[i] += d * in[i];
            }
        }
        if (l == 0) {
            break;
        }
        std::vector<double> prev(layer.in, 0.0);
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double d = delta[o];
            if (d == 0.0) {
                continue;
            }
            const double* row = &layer.weights[o * layer.in];
            for (std::size_t i = 0; i < layer.in; ++i) {
                prev[i] += row[i] * d;
            }
        }
        const auto& z_prev = cache.pre_activations[l - 1];
        for (std::size_t i = 0; i < layer.in; ++i) {
            if (!(z_prev[i] > 0.0)) {
                prev[i] = 0.0;
            }
        }
        delta = std::move(prev);
    }
}

inline ModelParams backward(const ModelParams& p, const ForwardCache& cache,
                            std::span<const double> grad_logits) {
    ModelParams grad = zero_params(p.widths);
    backward_accumulate(p, cache, grad_logits, grad);
    return grad;
}

struct AdamConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

struct AdamState {
    AdamConfig config;
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;

    AdamState() = default;
    AdamState(AdamConfig cfg, std::size_t n) : config(cfg), m(n, 0.0), v(n, 0.0) {}
};

/// One Adam update with bias correction. Decoupled weight decay shrinks the
/// parameters before the moment-based step.
inline void adam_step(AdamState& state, ModelParams& p, const ModelParams& grad) {
    if (!grad.same_architecture(p)) {
        throw std::invalid_argument("adam_step: gradient architecture mismatch");
    }
    const std::size_t n = p.flat_size();
    if (state.m.size() != n || state.v.size() != n) {
        throw std::invalid_argument("adam_step: optimizer state size mismatch");
    }
    auto theta = p.flatten();
    const auto g = grad.flatten();
    for (double x : g) {
        if (!std::isfinite(x)) {
            throw TrainingError("adam_step: non-finite gradient");
        }
    }
    const auto& c = state.config;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < n; ++i) {
        theta[i] -= c.lr * c.weight_decay * theta[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g[i];
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        theta[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
    p.assign_flat(theta);
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("cosine_similarity: length mismatch");
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Checkpoint format (text, version 1):
//   feal-params 1
//   widths <n> w0 w1 ...
//   hidden relu
//   values <count>
//   one shortest-round-trip decimal per line
inline void save_params(std::ostream& os, const ModelParams& p) {
    os << "feal-params 1\nwidths " << p.widths.size();
    for (auto w : p.widths) {
        os << ' ' << w;
    }
    const auto flat = p.flatten();
    os << "\nhidden relu\nvalues " << flat.size() << '\n';
    char buf[32];
    for (double x : flat) {
        auto res = std::to_chars(buf, buf + sizeof buf, x);
        os.write(buf, res.ptr - buf);
        os.put('\n');
    }
}

inline ModelParams load_params(std::istream& is) {
    auto fail = [](const std::string& what) {
        return std::runtime_error("load_params: " + what);
    };
    std::string tag;
    int version = 0;
    if (!(is >> tag >> version) || tag != "feal-params") {
        throw fail("missing header");
    }
    if (version != 1) {
        throw fail("unsupported version " + std::to_string(version));
    }
    std::size_t n = 0;
    if (!(is >> tag >> n) || tag != "widths") {
        throw fail("missing widths");
    }
    std::vector<std::size_t> widths(n);
    for (auto& w : widths) {
        if (!(is >> w)) {
            throw fail("truncated widths");
        }
    }
    std::string act;
    if (!(is >> tag >> act) || tag != "hidden" || act != "relu") {
        throw fail("unsupported hidden activation");
    }
    std::size_t count = 0;
    if (!(is >> tag >> count) || tag != "values") {
        throw fail("missing values");
    }
    ModelParams p = zero_params(widths);
    if (count != p.flat_size()) {
        throw fail("value count does not match architecture");
    }
    std::vector<double> flat(count);
    std::string tok;
    for (auto& x : flat) {
        if (!(is >> tok)) {
            throw fail("truncated values");
        }
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), x);
        if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
            throw fail("bad value '" + tok + "'");
        }
    }
    p.assign_flat(flat);
    return p;
}

}  // namespace feal

#endif  // FEAL_NN_HPP
