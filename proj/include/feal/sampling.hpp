#ifndef FEAL_SAMPLING_HPP
#define FEAL_SAMPLING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "feal/evidential.hpp"
#include "feal/federation.hpp"
#include "feal/nn.hpp"
#include "feal/numerics.hpp"

namespace feal {

/// Sample indices chosen for annotation, in selection order, with the score
/// that ranked each one.
struct QuerySet {
    std::vector<std::size_t> indices;
    std::vector<double> scores;

    std::size_t size() const { return indices.size(); }
    bool empty() const { return indices.empty(); }
};

struct RelaxationConfig {
    double tau = 0.85;
    std::size_t min_neighbors = 5;
};

inline constexpr RelaxationConfig kClassificationRelaxation{0.85, 5};
inline constexpr RelaxationConfig kSegmentationRelaxation{0.90, 10};

enum class Strategy { random, entropy_g, entropy_l, entropy_e, coreset, badge, feal };

inline std::string_view strategy_name(Strategy s) {
    switch (s) {
        case Strategy::random: return "random";
        case Strategy::entropy_g: return "entropy_g";
        case Strategy::entropy_l: return "entropy_l";
        case Strategy::entropy_e: return "entropy_e";
        case Strategy::coreset: return "coreset";
        case Strategy::badge: return "badge";
        case Strategy::feal: return "feal";
    }
    return "unknown";
}

inline Strategy parse_strategy(std::string_view tag) {
    for (auto s : {Strategy::random, Strategy::entropy_g, Strategy::entropy_l, Strategy::entropy_e,
                   Strategy::coreset, Strategy::badge, Strategy::feal}) {
        if (strategy_name(s) == tag) {
            return s;
        }
    }
    throw std::invalid_argument("unknown strategy '" + std::string(tag) + "'");
}

/// Per-item model outputs over an unlabeled pool. Segmentation items are
/// summarized by cell means.
struct PoolOutputs {
    std::vector<std::size_t> indices;
    std::vector<UncertaintyTriple> uncertainty;
    std::vector<std::vector<double>> posterior_global;
    std::vector<std::vector<double>> posterior_local;
    std::vector<std::vector<double>> embedding_local;

    std::size_t size() const { return indices.size(); }
};

inline std::vector<double> mean_embedding(const ModelParams& p, const Partition& data,
                                          std::size_t item) {
    std::vector<double> e(p.embedding_width(), 0.0);
    for (std::size_t m = 0; m < data.cells; ++m) {
        const auto cache = forward(p, data.cell_features(item, m));
        for (std::size_t i = 0; i < e.size(); ++i) {
            e[i] += cache.embedding[i];
        }
    }
    for (auto& v : e) {
        v /= static_cast<double>(data.cells);
    }
    return e;
}

inline PoolOutputs evaluate_pool(const Partition& data, std::span<const std::size_t> indices,
                                 const ModelParams& global, const ModelParams& local,
                                 const CalibrationOptions& calib = {}) {
    if (!global.same_architecture(local)) {
        throw std::invalid_argument("evaluate_pool: global and local architectures differ");
    }
    PoolOutputs out;
    out.indices.assign(indices.begin(), indices.end());
    const std::size_t k = data.classes;
    const double inv = 1.0 / static_cast<double>(data.cells);
    for (auto item : indices) {
        UncertaintyTriple t{0.0, 0.0, 0.0, 0.0};
        std::vector<double> pg(k, 0.0);
        std::vector<double> pl(k, 0.0);
        std::vector<double> emb(local.embedding_width(), 0.0);
        for (std::size_t m = 0; m < data.cells; ++m) {
            const auto x = data.cell_features(item, m);
            const auto cg = forward(global, x);
            const auto cl = forward(local, x);
            const auto dg = alpha_from_logits(cg.logits);
            const auto dl = alpha_from_logits(cl.logits);
            const auto one = calibrated_uncertainty(dg, dl, calib);
            t.ale_global += inv * one.ale_global;
            t.ale_local += inv * one.ale_local;
            t.epi_global += inv * one.epi_global;
            const auto qg = posterior(dg);
            const auto ql = posterior(dl);
            for (std::size_t c = 0; c < k; ++c) {
                pg[c] += inv * qg[c];
                pl[c] += inv * ql[c];
            }
            for (std::size_t i = 0; i < emb.size(); ++i) {
                emb[i] += inv * cl.embedding[i];
            }
        }
        t.calibrated = (t.ale_global + t.ale_local) * (t.epi_global + calib.epi_shift);
        out.uncertainty.push_back(t);
        out.posterior_global.push_back(std::move(pg));
        out.posterior_local.push_back(std::move(pl));
        out.embedding_local.push_back(std::move(emb));
    }
    return out;
}

/// Calibrated uncertainty of every listed item under the global and local models.
inline std::vector<UncertaintyTriple> ces_scores(const Partition& data,
                                                 std::span<const std::size_t> indices,
                                                 const ModelParams& global,
                                                 const ModelParams& local,
                                                 const CalibrationOptions& calib = {}) {
    return evaluate_pool(data, indices, global, local, calib).uncertainty;
}

/// Which uncertainty terms enter the ranking score. Enabled aleatoric terms
/// are summed; an enabled epistemic term multiplies that sum (or stands alone).
struct UncertaintyComponents {
    bool epi_global = true;
    bool ale_global = true;
    bool ale_local = true;

    bool any() const { return epi_global || ale_global || ale_local; }
};

inline double component_score(const UncertaintyTriple& t, const UncertaintyComponents& comp,
                              double epi_shift = 0.0) {
    if (!comp.any()) {
        throw std::invalid_argument("component_score: no uncertainty component enabled");
    }
    const bool has_ale = comp.ale_global || comp.ale_local;
    const double ale = (comp.ale_global ? t.ale_global : 0.0) + (comp.ale_local ? t.ale_local : 0.0);
    if (!comp.epi_global) {
        return ale;
    }
    const double epi = t.epi_global + epi_shift;
    return has_ale ? ale * epi : epi;
}

/// Positions 0..n-1 sorted by descending score; ties by ascending position.
inline std::vector<std::size_t> rank_descending(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

/// Unit-normalized copies; zero vectors stay zero (cosine 0 to everything).
inline std::vector<std::vector<double>> normalize_rows(
    std::span<const std::vector<double>> embeddings) {
    std::vector<std::vector<double>> out(embeddings.begin(), embeddings.end());
    for (auto& e : out) {
        double n = 0.0;
        for (double v : e) {
            n += v * v;
        }
        if (n > 0.0) {
            n = std::sqrt(n);
            for (auto& v : e) {
                v /= n;
            }
        }
    }
    return out;
}

/// Walks candidates in the given (descending-score) order. A candidate is
/// skipped only when it has at least `min_neighbors` pool members with cosine
/// similarity >= tau and one of those is already selected. Returns selected
/// pool positions in selection order; may return fewer than `budget` when the
/// candidates run out.
inline std::vector<std::size_t> diversity_relaxation(
    std::span<const std::size_t> candidates, std::span<const std::vector<double>> embeddings,
    std::int64_t budget, const RelaxationConfig& cfg) {
    if (budget < 0) {
        throw std::invalid_argument("diversity_relaxation: budget must be non-negative");
    }
    if (!(cfg.tau > 0.0 && cfg.tau <= 1.0) || cfg.min_neighbors < 1) {
        throw std::invalid_argument("diversity_relaxation: tau must be in (0,1] and n >= 1");
    }
    const auto unit = normalize_rows(embeddings);
    const std::size_t n = unit.size();
    std::vector<char> selected(n, 0);
    std::vector<std::size_t> q;
    const auto b = static_cast<std::size_t>(budget);
    for (std::size_t pos = 0; pos < candidates.size() && q.size() < b; ++pos) {
        const std::size_t i = candidates[pos];
        std::size_t neighbors = 0;
        bool touches_query = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) {
                continue;
            }
            double dot = 0.0;
            for (std::size_t d = 0; d < unit[i].size(); ++d) {
                dot += unit[i][d] * unit[j][d];
            }
            if (dot >= cfg.tau) {
                ++neighbors;
                touches_query = touches_query || selected[j] != 0;
            }
        }
        if (neighbors < cfg.min_neighbors || !touches_query) {
            selected[i] = 1;
            q.push_back(i);
        }
    }
    return q;
}

/// Appends the highest-ranked unselected candidates until `budget` is met.
inline void backfill(std::vector<std::size_t>& chosen, std::span<const std::size_t> candidates,
                     std::size_t budget) {
    for (auto c : candidates) {
        if (chosen.size() >= budget) {
            break;
        }
        if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) {
            chosen.push_back(c);
        }
    }
}

struct CesOptions {
    UncertaintyComponents components;
    RelaxationConfig relaxation = kClassificationRelaxation;
    bool use_relaxation = true;
    CalibrationOptions calibration;
};

/// Calibrated evidential sampling over a scored pool.
inline QuerySet ces_select(const PoolOutputs& pool, std::size_t budget, const CesOptions& opts) {
    std::vector<double> scores(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        scores[i] = component_score(pool.uncertainty[i], opts.components,
                                    opts.calibration.epi_shift);
    }
    const auto order = rank_descending(scores);
    const std::size_t b = std::min(budget, pool.size());
    std::vector<std::size_t> chosen;
    if (opts.use_relaxation) {
        chosen = diversity_relaxation(order, pool.embedding_local, static_cast<std::int64_t>(b),
                                      opts.relaxation);
        backfill(chosen, order, b);
    } else {
        chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(b));
    }
    QuerySet q;
    for (auto pos : chosen) {
        q.indices.push_back(pool.indices[pos]);
        q.scores.push_back(scores[pos]);
    }
    return q;
}

inline QuerySet top_by_score(const PoolOutputs& pool, std::span<const double> scores,
                             std::size_t budget) {
    const auto order = rank_descending(scores);
    QuerySet q;
    for (std::size_t i = 0; i < std::min(budget, order.size()); ++i) {
        q.indices.push_back(pool.indices[order[i]]);
        q.scores.push_back(scores[order[i]]);
    }
    return q;
}

inline QuerySet random_select(std::span<const std::size_t> unlabeled, std::size_t budget,
                              Rng& rng) {
    std::vector<std::size_t> pool(unlabeled.begin(), unlabeled.end());
    const std::size_t b = std::min(budget, pool.size());
    QuerySet q;
    for (std::size_t i = 0; i < b; ++i) {
        const auto j = i + rng.below(pool.size() - i);
        std::swap(pool[i], pool[j]);
        q.indices.push_back(pool[i]);
        q.scores.push_back(0.0);
    }
    return q;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// Greedy k-center: repeatedly take the pool point farthest from every
/// labeled or already chosen center.
inline std::vector<std::size_t> k_center_greedy(std::span<const std::vector<double>> pool,
                                                std::span<const std::vector<double>> centers,
                                                std::size_t budget, std::vector<double>* picked_distance) {
    if (centers.empty()) {
        throw std::invalid_argument("k_center_greedy: need at least one labeled center");
    }
    std::vector<double> dist(pool.size(), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        for (const auto& c : centers) {
            dist[i] = std::min(dist[i], squared_distance(pool[i], c));
        }
    }
    std::vector<std::size_t> chosen;
    std::vector<char> taken(pool.size(), 0);
    const std::size_t b = std::min(budget, pool.size());
    while (chosen.size() < b) {
        std::size_t best = pool.size();
        for (std::size_t i = 0; i < pool.size(); ++i) {
            if (!taken[i] && (best == pool.size() || dist[i] > dist[best])) {
                best = i;
            }
        }
        taken[best] = 1;
        chosen.push_back(best);
        if (picked_distance != nullptr) {
            picked_distance->push_back(std::sqrt(dist[best]));
        }
        for (std::size_t i = 0; i < pool.size(); ++i) {
            dist[i] = std::min(dist[i], squared_distance(pool[i], pool[best]));
        }
    }
    return chosen;
}

/// BADGE gradient embedding: (p - onehot(argmax p)) outer embedding.
inline std::vector<double> gradient_embedding(std::span<const double> prob,
                                              std::span<const double> embedding) {
    const auto top =
        static_cast<std::size_t>(std::max_element(prob.begin(), prob.end()) - prob.begin());
    std::vector<double> g;
    g.reserve(prob.size() * embedding.size());
    for (std::size_t c = 0; c < prob.size(); ++c) {
        const double coef = prob[c] - (c == top ? 1.0 : 0.0);
        for (double e : embedding) {
            g.push_back(coef * e);
        }
    }
    return g;
}

/// k-means++ seeding: the largest-norm point first, then D^2 sampling.
inline std::vector<std::size_t> kmeanspp_seeding(std::span<const std::vector<double>> points,
                                                 std::size_t budget, Rng& rng,
                                                 std::vector<double>* picked_weight) {
    const std::size_t n = points.size();
    const std::size_t b = std::min(budget, n);
    std::vector<std::size_t> chosen;
    if (b == 0) {
        return chosen;
    }
    std::vector<char> taken(n, 0);
    std::size_t first = 0;
    double best_norm = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (double v : points[i]) {
            s += v * v;
        }
        if (s > best_norm) {
            best_norm = s;
            first = i;
        }
    }
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    auto take = [&](std::size_t i, double weight) {
        taken[i] = 1;
        chosen.push_back(i);
        if (picked_weight != nullptr) {
            picked_weight->push_back(weight);
        }
        for (std::size_t j = 0; j < n; ++j) {
            dist[j] = std::min(dist[j], squared_distance(points[j], points[i]));
        }
    };
    take(first, best_norm);
    while (chosen.size() < b) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!taken[i]) {
                total += dist[i];
            }
        }
        std::size_t pick = n;
        if (total > 0.0) {
            double u = rng.uniform() * total;
            for (std::size_t i = 0; i < n; ++i) {
                if (taken[i] || dist[i] <= 0.0) {
                    continue;
                }
                pick = i;
                if (u < dist[i]) {
                    break;
                }
                u -= dist[i];
            }
        } else {
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < n; ++i) {
                if (!taken[i]) {
                    rest.push_back(i);
                }
            }
            pick = rest[rng.below(rest.size())];
        }
        take(pick, dist[pick]);
    }
    return chosen;
}

/// Strategy-specific selection of up to `budget` items from the client's
/// unlabeled pool. Round-one random selection uses `random_select` directly.
inline QuerySet select_queries(Strategy strategy, const ClientState& client,
                               const ModelParams& global, std::size_t budget, Rng& rng,
                               const CesOptions& ces = {}) {
    const auto& data = *client.data;
    if (strategy == Strategy::random) {
        return random_select(client.unlabeled, budget, rng);
    }
    const auto pool = evaluate_pool(data, client.unlabeled, global, client.local, ces.calibration);
    switch (strategy) {
        case Strategy::entropy_g:
        case Strategy::entropy_l:
        case Strategy::entropy_e: {
            std::vector<double> scores(pool.size());
            for (std::size_t i = 0; i < pool.size(); ++i) {
                const double hg = shannon_entropy(pool.posterior_global[i]);
                const double hl = shannon_entropy(pool.posterior_local[i]);
                scores[i] = strategy == Strategy::entropy_g ? hg
                            : strategy == Strategy::entropy_l ? hl
                                                              : hg + hl;
            }
            return top_by_score(pool, scores, budget);
        }
        case Strategy::coreset: {
            if (client.labeled.empty()) {
                throw std::invalid_argument("coreset: labeled set is empty");
            }
            std::vector<std::vector<double>> centers;
            for (auto i : client.labeled) {
                centers.push_back(mean_embedding(client.local, data, i));
            }
            std::vector<double> d;
            const auto picks = k_center_greedy(pool.embedding_local, centers, budget, &d);
            QuerySet q;
            for (std::size_t i = 0; i < picks.size(); ++i) {
                q.indices.push_back(pool.indices[picks[i]]);
                q.scores.push_back(d[i]);
            }
            return q;
        }
        case Strategy::badge: {
            std::vector<std::vector<double>> g;
            for (std::size_t i = 0; i < pool.size(); ++i) {
                g.push_back(gradient_embedding(pool.posterior_local[i], pool.embedding_local[i]));
            }
            std::vector<double> w;
            const auto picks = kmeanspp_seeding(g, budget, rng, &w);
            QuerySet q;
            for (std::size_t i = 0; i < picks.size(); ++i) {
                q.indices.push_back(pool.indices[picks[i]]);
                q.scores.push_back(w[i]);
            }
            return q;
        }
        case Strategy::feal:
            return ces_select(pool, budget, ces);
        case Strategy::random:
            break;
    }
    throw std::invalid_argument("select_queries: unhandled strategy");
}

/// Items the client may still annotate under the labeled-ratio cap.
inline std::size_t cap_allowance(const ClientState& c, double cap = kMaxAnnotationRatio) {
    const auto limit = static_cast<std::size_t>(std::floor(cap * static_cast<double>(c.pool_size()) + 1e-9));
    return limit > c.labeled.size() ? limit - c.labeled.size() : 0;
}

struct AnnotationOutcome {
    std::size_t added = 0;
    bool truncated = false;
    /// Query positions that were annotated, in query order.
    std::vector<std::size_t> positions;
};

/// Moves the query's items from U_k to L_k. When the annotation cap allows
/// fewer than |q| items, the highest-scoring ones are kept.
inline AnnotationOutcome annotate_query(ClientState& c, const QuerySet& q,
                                        double cap = kMaxAnnotationRatio) {
    if (q.scores.size() != q.indices.size()) {
        throw ProtocolError("annotate_query: query has mismatched index and score lists");
    }
    std::vector<std::size_t> seen;
    for (auto i : q.indices) {
        if (!std::binary_search(c.unlabeled.begin(), c.unlabeled.end(), i)) {
            throw ProtocolError("annotate_query: index " + std::to_string(i) +
                                " is not in the unlabeled set of client " + std::to_string(c.id));
        }
        if (std::find(seen.begin(), seen.end(), i) != seen.end()) {
            throw ProtocolError("annotate_query: duplicate index " + std::to_string(i));
        }
        seen.push_back(i);
    }
    AnnotationOutcome out;
    const std::size_t take = std::min(cap_allowance(c, cap), q.indices.size());
    out.truncated = take < q.indices.size();
    auto keep = rank_descending(q.scores);
    keep.resize(take);
    std::sort(keep.begin(), keep.end());
    for (auto pos : keep) {
        const auto i = q.indices[pos];
        c.labeled.push_back(i);
        c.unlabeled.erase(std::lower_bound(c.unlabeled.begin(), c.unlabeled.end(), i));
    }
    out.added = take;
    out.positions = std::move(keep);
    return out;
}

}  // namespace feal

#endif  // FEAL_SAMPLING_HPP
