#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "feal/data.hpp"
#include "feal/sampling.hpp"

using namespace feal;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0;
    double aa = 0.0;
    double bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

// Algorithm 1 as written: walk U in descending score; N(x_i) holds every
// other unlabeled x_j with s(x_i, x_j) >= tau; keep x_i when |N| < n or N
// shares nothing with Q; stop once |Q| = B.
std::vector<std::size_t> literal_relaxation(const std::vector<double>& scores,
                                            const std::vector<std::vector<double>>& emb,
                                            std::size_t budget, double tau, std::size_t n) {
    std::vector<std::size_t> sorted(scores.size());
    for (std::size_t i = 0; i < sorted.size(); ++i) sorted[i] = i;
    std::stable_sort(sorted.begin(), sorted.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    std::set<std::size_t> q_set;
    std::vector<std::size_t> q;
    for (auto xi : sorted) {
        if (q.size() == budget) break;
        std::set<std::size_t> neighbors;
        for (std::size_t xj = 0; xj < emb.size(); ++xj) {
            if (xj != xi && cosine(emb[xi], emb[xj]) >= tau) neighbors.insert(xj);
        }
        bool intersects = false;
        for (auto j : neighbors) intersects = intersects || q_set.count(j) > 0;
        if (neighbors.size() < n || !intersects) {
            q.push_back(xi);
            q_set.insert(xi);
        }
    }
    return q;
}

std::vector<std::size_t> top_b(const std::vector<double>& scores, std::size_t b) {
    auto order = rank_descending(scores);
    order.resize(std::min(b, order.size()));
    return order;
}

ClientState bare_client(std::size_t labeled, std::size_t unlabeled) {
    ClientState c;
    for (std::size_t i = 0; i < labeled; ++i) c.labeled.push_back(i);
    for (std::size_t i = labeled; i < labeled + unlabeled; ++i) c.unlabeled.push_back(i);
    return c;
}

QuerySet query_of(std::vector<std::size_t> idx, std::vector<double> scores = {}) {
    QuerySet q;
    q.indices = std::move(idx);
    q.scores = scores.empty() ? std::vector<double>(q.indices.size(), 0.0) : std::move(scores);
    return q;
}

// Single-feature partition whose items are the given scalar values.
Partition scalar_partition(const std::vector<double>& xs, std::size_t classes = 2) {
    Partition p;
    p.dim = 1;
    p.classes = classes;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        p.features.push_back(xs[i]);
        p.labels.push_back(0);
        p.train.push_back(i);
    }
    return p;
}

}  // namespace

TEST(Relaxation, NearDuplicatesAtopRankingAreSkipped) {
    const std::vector<std::vector<double>> emb{{1.0, 0.0}, {1.0, 0.01}, {1.0, 0.02}, {0.0, 1.0}, {0.7, 0.7}};
    const std::vector<std::size_t> candidates{0, 1, 2, 3, 4};
    const auto q = diversity_relaxation(candidates, emb, 2, {0.85, 1});
    EXPECT_EQ(q, (std::vector<std::size_t>{0, 3}));
}

TEST(Relaxation, BudgetOneTakesTopCandidate) {
    const std::vector<std::vector<double>> emb{{1, 0}, {1, 0.01}, {0, 1}};
    EXPECT_EQ(diversity_relaxation(std::vector<std::size_t>{2, 0, 1}, emb, 1, {0.85, 1}),
              std::vector<std::size_t>{2});
    EXPECT_TRUE(diversity_relaxation(std::vector<std::size_t>{2, 0, 1}, emb, 0, {0.85, 1}).empty());
}

TEST(Relaxation, RejectsInvalidArguments) {
    const std::vector<std::vector<double>> emb{{1, 0}};
    const std::vector<std::size_t> cand{0};
    EXPECT_THROW(diversity_relaxation(cand, emb, -1, {0.85, 5}), std::invalid_argument);
    EXPECT_THROW(diversity_relaxation(cand, emb, 1, {0.0, 5}), std::invalid_argument);
    EXPECT_THROW(diversity_relaxation(cand, emb, 1, {1.5, 5}), std::invalid_argument);
    EXPECT_THROW(diversity_relaxation(cand, emb, 1, {0.85, 0}), std::invalid_argument);
}

TEST(Relaxation, MatchesLiteralAlgorithmOnSmallInstances) {
    std::size_t mismatches = 0;
    std::size_t instances = 0;
    for (std::uint64_t seed = 1; seed <= 500; ++seed) {
        Rng rng(seed);
        const std::size_t u = 1 + rng.below(8);
        const std::size_t dim = 2 + rng.below(3);
        std::vector<std::vector<double>> emb(u, std::vector<double>(dim));
        for (auto& e : emb) {
            for (auto& v : e) v = rng.uniform();
        }
        // plant exact duplicates and near-duplicates so the skip branch fires
        if (u >= 3 && rng.uniform() < 0.5) emb[1] = emb[0];
        if (u >= 4 && rng.uniform() < 0.5) {
            emb[3] = emb[2];
            emb[3][0] += 0.01;
        }
        std::vector<double> scores(u);
        for (auto& s : scores) s = std::round(rng.uniform() * 6.0);  // ties exercise index order
        for (std::size_t b = 1; b <= 3; ++b) {
            for (double tau : {0.6, 0.8, 0.85, 0.95, 0.999}) {
                for (std::size_t n = 1; n <= 4; ++n) {
                    const auto order = rank_descending(scores);
                    const auto got = diversity_relaxation(order, emb, static_cast<std::int64_t>(b), {tau, n});
                    const auto want = literal_relaxation(scores, emb, b, tau, n);
                    mismatches += got != want ? 1 : 0;
                    ++instances;

                    // subset of the candidates, and selections follow the ranking
                    std::vector<std::size_t> rank_of(u);
                    for (std::size_t r = 0; r < u; ++r) rank_of[order[r]] = r;
                    for (std::size_t i = 1; i < got.size(); ++i) EXPECT_LT(rank_of[got[i - 1]], rank_of[got[i]]);
                    EXPECT_LE(got.size(), std::min(b, u));
                }
            }
        }
    }
    EXPECT_EQ(mismatches, 0u) << "of " << instances;
}

TEST(Relaxation, DegenerateSettingsReduceToTopB) {
    for (std::uint64_t seed = 1; seed <= 200; ++seed) {
        Rng rng(seed);
        const std::size_t u = 1 + rng.below(8);
        std::vector<std::vector<double>> emb(u, std::vector<double>(3));
        for (auto& e : emb) {
            for (auto& v : e) v = rng.uniform();
        }
        std::vector<double> scores(u);
        for (auto& s : scores) s = rng.normal();
        const auto order = rank_descending(scores);
        for (std::size_t b = 1; b <= 3; ++b) {
            const auto expect = top_b(scores, b);
            EXPECT_EQ(diversity_relaxation(order, emb, static_cast<std::int64_t>(b), {1.0, 1}), expect);
            EXPECT_EQ(diversity_relaxation(order, emb, static_cast<std::int64_t>(b), {0.5, u + 1}), expect);
        }
    }
}

TEST(Relaxation, BackfillCompletesBudgetInRankOrder) {
    // all five points coincide: after the first pick every candidate is skipped
    const std::vector<std::vector<double>> emb(5, std::vector<double>{1.0, 1.0});
    const std::vector<std::size_t> order{4, 2, 0, 1, 3};
    auto q = diversity_relaxation(order, emb, 3, {0.85, 1});
    EXPECT_EQ(q, std::vector<std::size_t>{4});
    backfill(q, order, 3);
    EXPECT_EQ(q, (std::vector<std::size_t>{4, 2, 0}));
    backfill(q, order, 2);
    EXPECT_EQ(q.size(), 3u);
}

TEST(Scoring, ComponentCombinations) {
    const UncertaintyTriple t{0.3, 0.4, -2.0, 0.0};
    EXPECT_DOUBLE_EQ(component_score(t, {true, true, true}), (0.3 + 0.4) * -2.0);
    EXPECT_DOUBLE_EQ(component_score(t, {false, true, false}), 0.3);
    EXPECT_DOUBLE_EQ(component_score(t, {false, false, true}), 0.4);
    EXPECT_DOUBLE_EQ(component_score(t, {false, true, true}), 0.7);
    EXPECT_DOUBLE_EQ(component_score(t, {true, false, false}), -2.0);
    EXPECT_DOUBLE_EQ(component_score(t, {true, true, false}), 0.3 * -2.0);
    EXPECT_DOUBLE_EQ(component_score(t, {true, false, true}, 5.0), 0.4 * 3.0);
    EXPECT_THROW(component_score(t, {false, false, false}), std::invalid_argument);
}

TEST(CesScores, IdenticalModelsGiveEqualAleatoric) {
    auto g = GeneratorConfig{};
    g.clients = 2;
    g.dim = 4;
    g.samples_per_client = 40;
    const auto d = generate_multidomain(g);
    const auto p = init_params({4, 8, 3}, 2);
    const auto& part = d.partitions[0];
    const auto t = ces_scores(part, part.train, p, p);
    ASSERT_EQ(t.size(), part.train.size());
    for (const auto& x : t) {
        EXPECT_EQ(x.ale_global, x.ale_local);
        EXPECT_NEAR(x.calibrated, 2.0 * x.ale_global * x.epi_global, 1e-12);
    }
    EXPECT_THROW(ces_scores(part, part.train, p, init_params({4, 9, 3}, 2)), std::invalid_argument);
}

TEST(CesScores, ZeroModelsScoreZero) {
    const auto part = scalar_partition({-1.0, 0.0, 3.5});
    const auto z = zero_params({1, 4, 2});
    for (const auto& t : ces_scores(part, part.train, z, z)) {
        EXPECT_NEAR(t.ale_global, 0.5, 1e-12);
        EXPECT_NEAR(t.ale_local, 0.5, 1e-12);
        EXPECT_NEAR(t.epi_global, 0.0, 1e-12);
        EXPECT_NEAR(t.calibrated, 0.0, 1e-12);
    }
}

TEST(CesSelect, WithoutRelaxationIsTopB) {
    PoolOutputs pool;
    Rng rng(5);
    for (std::size_t i = 0; i < 12; ++i) {
        pool.indices.push_back(100 + i);
        pool.uncertainty.push_back({rng.uniform(), rng.uniform(), -rng.uniform(0.0, 3.0), 0.0});
        pool.embedding_local.push_back({rng.uniform(), rng.uniform()});
    }
    CesOptions opts;
    opts.use_relaxation = false;
    const auto q = ces_select(pool, 4, opts);
    std::vector<double> scores;
    for (const auto& t : pool.uncertainty) scores.push_back(component_score(t, opts.components));
    const auto expect = top_b(scores, 4);
    ASSERT_EQ(q.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(q.indices[i], 100 + expect[i]);
        EXPECT_EQ(q.scores[i], scores[expect[i]]);
    }
    // relaxation plus backfill still fills the budget
    opts.use_relaxation = true;
    opts.relaxation = {0.5, 1};
    EXPECT_EQ(ces_select(pool, 4, opts).size(), 4u);
    EXPECT_EQ(ces_select(pool, 40, opts).size(), 12u);
}

TEST(Baselines, EntropyGlobalPrefersUncertainPosterior) {
    // x = 0 gives logits (0,0) -> (0.5,0.5); x = 1 gives (98,0) -> (0.99,0.01)
    auto global = zero_params({1, 1, 2});
    global.layers[0].weights = {1.0};
    global.layers[1].weights = {98.0, 0.0};
    const auto part = scalar_partition({0.0, 1.0});
    auto c = make_client(0, part, 1);
    c.local = zero_params({1, 1, 2});
    Rng rng(1);
    const auto q = select_queries(Strategy::entropy_g, c, global, 1, rng);
    ASSERT_EQ(q.size(), 1u);
    EXPECT_EQ(q.indices[0], 0u);
    EXPECT_NEAR(q.scores[0], std::log(2.0), 1e-12);
}

TEST(Baselines, EntropyEnsembleIsSumOfGlobalAndLocal) {
    auto g = GeneratorConfig{};
    g.clients = 2;
    g.dim = 4;
    g.samples_per_client = 60;
    const auto d = generate_multidomain(g);
    auto c = make_client(0, d.partitions[0], 5);
    c.local = init_params({4, 8, 3}, 3);
    const auto global = init_params({4, 8, 3}, 4);
    Rng rng(1);
    const auto all = c.unlabeled.size();
    auto as_map = [](const QuerySet& q) {
        std::map<std::size_t, double> m;
        for (std::size_t i = 0; i < q.size(); ++i) m[q.indices[i]] = q.scores[i];
        return m;
    };
    const auto eg = as_map(select_queries(Strategy::entropy_g, c, global, all, rng));
    const auto el = as_map(select_queries(Strategy::entropy_l, c, global, all, rng));
    const auto ee = as_map(select_queries(Strategy::entropy_e, c, global, all, rng));
    ASSERT_EQ(ee.size(), all);
    for (const auto& [i, s] : ee) EXPECT_NEAR(s, eg.at(i) + el.at(i), 1e-12);
}

TEST(Baselines, CoresetPicksFarthestPoint) {
    const std::vector<std::vector<double>> pool{{0.1}, {5.0}};
    const std::vector<std::vector<double>> centers{{0.0}};
    EXPECT_EQ(k_center_greedy(pool, centers, 1, nullptr), std::vector<std::size_t>{1});

    // same instance through the strategy, with an identity-like embedding
    auto local = zero_params({1, 1, 2});
    local.layers[0].weights = {1.0};
    const auto part = scalar_partition({0.0, 0.1, 5.0});
    auto c = make_client(0, part, 1);
    c.labeled = {0};
    c.unlabeled = {1, 2};
    c.local = local;
    Rng rng(1);
    const auto q = select_queries(Strategy::coreset, c, local, 1, rng);
    EXPECT_EQ(q.indices, std::vector<std::size_t>{2});
    EXPECT_NEAR(q.scores[0], 5.0, 1e-12);
    c.labeled.clear();
    EXPECT_THROW(select_queries(Strategy::coreset, c, local, 1, rng), std::invalid_argument);
}

TEST(Baselines, BadgeGradientEmbedding) {
    const auto g = gradient_embedding(std::vector<double>{0.2, 0.7, 0.1}, std::vector<double>{1.0, -2.0});
    const std::vector<double> want{0.2, -0.4, -0.3, 0.6, 0.1, -0.2};
    ASSERT_EQ(g.size(), want.size());
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], want[i], 1e-15);
}

TEST(Baselines, RandomIsSeedDeterministic) {
    std::vector<std::size_t> u(50);
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = 3 * i;
    Rng a(11);
    Rng b(11);
    const auto qa = random_select(u, 10, a);
    EXPECT_EQ(qa.indices, random_select(u, 10, b).indices);
    Rng c(12);
    EXPECT_NE(qa.indices, random_select(u, 10, c).indices);
    EXPECT_EQ(random_select(u, 80, c).size(), 50u);
}

TEST(Strategies, ReturnDistinctUnlabeledIndicesUpToBudget) {
    auto g = GeneratorConfig{};
    g.clients = 2;
    g.dim = 4;
    g.samples_per_client = 50;
    const auto d = generate_multidomain(g);
    const auto global = init_params({4, 8, 8, 3}, 7);
    for (auto s : {Strategy::random, Strategy::entropy_g, Strategy::entropy_l, Strategy::entropy_e,
                   Strategy::coreset, Strategy::badge, Strategy::feal}) {
        for (std::size_t labeled : {5u, 30u}) {
            auto c = make_client(0, d.partitions[0], 8);
            c.labeled.assign(c.unlabeled.begin(), c.unlabeled.begin() + static_cast<std::ptrdiff_t>(labeled));
            c.unlabeled.erase(c.unlabeled.begin(), c.unlabeled.begin() + static_cast<std::ptrdiff_t>(labeled));
            c.local = init_params({4, 8, 8, 3}, 8);
            for (std::size_t budget : {1u, 8u, 40u}) {
                const std::size_t b = std::min(budget, cap_allowance(c));
                Rng rng(3);
                const auto q = select_queries(s, c, global, b, rng);
                EXPECT_EQ(q.size(), std::min(b, c.unlabeled.size())) << strategy_name(s);
                EXPECT_EQ(q.scores.size(), q.size());
                std::set<std::size_t> seen(q.indices.begin(), q.indices.end());
                EXPECT_EQ(seen.size(), q.size());
                for (auto i : q.indices) {
                    EXPECT_TRUE(std::binary_search(c.unlabeled.begin(), c.unlabeled.end(), i));
                }
            }
        }
    }
}

TEST(Strategies, NamesRoundTrip) {
    for (auto s : {Strategy::random, Strategy::entropy_g, Strategy::entropy_l, Strategy::entropy_e,
                   Strategy::coreset, Strategy::badge, Strategy::feal}) {
        EXPECT_EQ(parse_strategy(strategy_name(s)), s);
    }
    EXPECT_THROW(parse_strategy("tod"), std::invalid_argument);
}

TEST(Annotation, MovesQueryIntoLabeledSet) {
    auto c = bare_client(10, 90);
    std::vector<std::size_t> q;
    for (std::size_t i = 10; i < 30; ++i) q.push_back(i);
    const auto out = annotate_query(c, query_of(q));
    EXPECT_EQ(out.added, 20u);
    EXPECT_FALSE(out.truncated);
    EXPECT_EQ(c.labeled.size(), 30u);
    EXPECT_EQ(c.unlabeled.size(), 70u);
    std::set<std::size_t> l(c.labeled.begin(), c.labeled.end());
    for (auto i : c.unlabeled) EXPECT_EQ(l.count(i), 0u);
    EXPECT_TRUE(std::is_sorted(c.unlabeled.begin(), c.unlabeled.end()));
}

TEST(Annotation, EmptyQueryLeavesStateUnchanged) {
    auto c = bare_client(10, 90);
    const auto before = c;
    const auto out = annotate_query(c, QuerySet{});
    EXPECT_EQ(out.added, 0u);
    EXPECT_EQ(c.labeled, before.labeled);
    EXPECT_EQ(c.unlabeled, before.unlabeled);
}

TEST(Annotation, CapTruncatesByScore) {
    auto full = bare_client(85, 15);
    EXPECT_EQ(cap_allowance(full), 0u);
    const auto out = annotate_query(full, query_of({90, 91}, {1.0, 2.0}));
    EXPECT_TRUE(out.truncated);
    EXPECT_EQ(out.added, 0u);
    EXPECT_EQ(full.labeled.size(), 85u);

    auto near = bare_client(83, 17);
    const auto part = annotate_query(near, query_of({90, 91, 92, 93}, {0.1, 0.9, 0.5, 0.7}));
    EXPECT_TRUE(part.truncated);
    EXPECT_EQ(part.added, 2u);
    EXPECT_EQ(part.positions, (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(near.labeled.back(), 93u);
    EXPECT_EQ(near.labeled[83], 91u);
    EXPECT_EQ(near.labeled.size(), 85u);
}

TEST(Annotation, RejectsIndicesOutsideUnlabeledSet) {
    auto c = bare_client(10, 90);
    EXPECT_THROW(annotate_query(c, query_of({5})), ProtocolError);
    EXPECT_THROW(annotate_query(c, query_of({500})), ProtocolError);
    EXPECT_THROW(annotate_query(c, query_of({20, 20})), ProtocolError);
    EXPECT_EQ(c.labeled.size(), 10u);
}
