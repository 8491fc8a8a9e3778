#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "decodekit/metrics.hpp"
#include "support/oracles.hpp"
#include "support/random_models.hpp"

using namespace decodekit;
using namespace decodekit::testing;

// ---------------------------------------------------------------------------
// rep-n and diversity

TEST(RepN, AllSameFourTokens) {
    const std::vector<TokenId> aaaa{0, 0, 0, 0};
    EXPECT_NEAR(*rep_n(aaaa, 2), 100.0 * 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(*rep_n(aaaa, 3), 50.0, 1e-12);
    EXPECT_EQ(*rep_n(aaaa, 4), 0.0);
    const auto d = diversity(aaaa);
    ASSERT_TRUE(d.diversity.has_value());
    EXPECT_NEAR(*d.diversity, 1.0 / 6.0, 1e-12);
    EXPECT_NEAR(*d.rep_at(2), 66.67, 5e-3);
}

TEST(RepN, DistinctTokensHaveNoRepetition) {
    const std::vector<TokenId> text{4, 1, 3, 0, 2, 7};
    for (std::size_t n = 2; n <= 4; ++n) EXPECT_EQ(*rep_n(text, n), 0.0);
    EXPECT_EQ(*diversity(text).diversity, 1.0);
}

TEST(RepN, ShortTextsAreAbsent) {
    EXPECT_FALSE(rep_n(std::vector<TokenId>{3}, 2).has_value());
    const auto d = diversity(std::vector<TokenId>{1, 2, 1});
    EXPECT_TRUE(d.too_short());
    EXPECT_TRUE(d.rep_at(2).has_value());
    EXPECT_TRUE(d.rep_at(3).has_value());
    EXPECT_FALSE(d.rep_at(4).has_value());
    EXPECT_TRUE(diversity(std::vector<TokenId>{}).too_short());
}

TEST(RepN, MatchesEnumerationOracleAndInvariants) {
    std::mt19937_64 gen(8);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t vocab = std::uniform_int_distribution<std::size_t>(2, 5)(gen);
        const auto text = random_context(gen, vocab, 4, 14);
        const auto d = diversity(text);
        double product = 1.0;
        for (std::size_t n = 2; n <= 4; ++n) {
            const double want = oracle_rep_n(text, n);
            const double got = *d.rep_at(n);
            EXPECT_NEAR(got, want, 1e-9 * std::max(1.0, std::abs(want)));
            EXPECT_GE(got, 0.0);
            EXPECT_LE(got, 100.0);
            product *= 1.0 - want / 100.0;
        }
        EXPECT_NEAR(*d.diversity, product, 1e-12);
        EXPECT_GE(*d.diversity, 0.0);
        EXPECT_LE(*d.diversity, 1.0);

        // Relabeling token ids consistently changes nothing.
        std::vector<TokenId> perm(vocab);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), gen);
        std::vector<TokenId> relabeled;
        for (TokenId t : text) relabeled.push_back(perm[static_cast<std::size_t>(t)] + 10);
        for (std::size_t n = 2; n <= 4; ++n) EXPECT_EQ(*rep_n(relabeled, n), *rep_n(text, n));
    }
}

// ---------------------------------------------------------------------------
// Coherence

TEST(Coherence, UniformScorerIsExactlyLogOneOverV) {
    for (std::size_t v : {2u, 4u, 7u}) {
        const auto m = TableModel::unconditional(Vocabulary::make(v), std::vector<double>(v, 1.0 / double(v)));
        std::vector<TokenId> cont(37);
        for (std::size_t i = 0; i < cont.size(); ++i) cont[i] = static_cast<TokenId>(i % v);
        const auto c = coherence(m, std::vector<TokenId>{0}, cont);
        EXPECT_EQ(c.value, std::log(1.0 / double(v)));
        EXPECT_EQ(c.token_count, 37u);
        EXPECT_FALSE(c.degenerate);
    }
}

TEST(Coherence, CertainScorerIsZero) {
    TableModel m(Vocabulary::make(2), 1, {{{}, {0.0, 1.0}}, {{1}, {1.0, 0.0}}}, {{{1.0}, {1.0}}});
    EXPECT_EQ(coherence(m, std::vector<TokenId>{0}, std::vector<TokenId>{1, 0, 1, 0}).value, 0.0);
}

TEST(Coherence, EqualsMeanOfScoredLogProbs) {
    std::mt19937_64 gen(12);
    NgramModel ngram(Vocabulary::make(6, 5), 3, 0.1, {{0, 1, 2, 3, 4, 1, 2, 0}, {3, 3, 2, 1}});
    for (int trial = 0; trial < 200; ++trial) {
        const auto table = random_table_model(gen, 6, false);
        const LanguageModel& scorer = trial % 2 == 0 ? static_cast<const LanguageModel&>(ngram) : table;
        const auto prompt = random_context(gen, 6, 1, 5);
        const auto cont = random_context(gen, 6, 1, 40);
        const auto scored = scorer.score(prompt, cont);
        const double mean =
            std::accumulate(scored.logprobs.begin(), scored.logprobs.end(), 0.0) / double(scored.logprobs.size());
        const auto c = coherence(scorer, prompt, cont);
        EXPECT_NEAR(c.value, mean, 1e-12);
        EXPECT_LE(c.value, 0.0);
        EXPECT_EQ(c.token_count, cont.size());
    }
}

TEST(Coherence, ZeroProbabilityIsDegenerate) {
    const auto m = TableModel::unconditional(Vocabulary::make(3), {0.5, 0.5, 0.0});
    const auto c = coherence(m, std::vector<TokenId>{0}, std::vector<TokenId>{1, 2, 0});
    EXPECT_TRUE(c.degenerate);
    EXPECT_FALSE(std::isfinite(c.value));
    EXPECT_THROW(coherence(m, std::vector<TokenId>{0}, std::vector<TokenId>{}), InputError);
}

// ---------------------------------------------------------------------------
// Divergence frontier

TEST(Frontier, TruncationKeepsThePrefix) {
    std::vector<TokenId> long_text(256);
    std::iota(long_text.begin(), long_text.end(), 0);
    const auto cut = truncate_for_frontier(long_text);
    EXPECT_EQ(cut.size(), 128u);
    EXPECT_EQ(cut.back(), 127);
    EXPECT_EQ(truncate_for_frontier(std::vector<TokenId>(50, 1)).size(), 50u);
    EXPECT_TRUE(truncate_for_frontier(std::vector<TokenId>{}).empty());
}

TEST(Frontier, GridAndKl) {
    EXPECT_EQ(interior_mixture_grid(3), (std::vector<double>{0.25, 0.5, 0.75}));
    const auto g = interior_mixture_grid(25);
    EXPECT_EQ(g.size(), 25u);
    EXPECT_GT(g.front(), 0.0);
    EXPECT_LT(g.back(), 1.0);
    EXPECT_NEAR(kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75}),
                0.5 * std::log(2.0) + 0.5 * std::log(0.5 / 0.75), 1e-15);
    EXPECT_TRUE(std::isinf(kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0})));
}

TEST(Frontier, ThreeBinHandTrapezoid) {
    const std::vector<double> p{0.5, 0.3, 0.2};
    const std::vector<double> q{0.2, 0.3, 0.5};
    const auto s = frontier_from_histograms(p, q, std::vector<double>{0.25, 0.5, 0.75}, 5.0);
    ASSERT_EQ(s.curve.size(), 5u);
    EXPECT_EQ(s.mixture_weights, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
    EXPECT_EQ(s.curve.front(), std::make_pair(1.0, 0.0));
    EXPECT_EQ(s.curve.back(), std::make_pair(0.0, 1.0));
    // Points worked out term by term: at w = 0.5 the mixture is
    // (0.35, 0.3, 0.35) and KL(P || R) = KL(Q || R) = 0.5 log(5/3.5) + 0.2 log(2/3.5).
    const double kl_mid = 0.5 * std::log(0.5 / 0.35) + 0.2 * std::log(0.2 / 0.35);
    EXPECT_NEAR(s.curve[2].first, std::exp(-5.0 * kl_mid), 1e-12);
    EXPECT_NEAR(s.curve[2].second, std::exp(-5.0 * kl_mid), 1e-12);
    // Trapezoids along (1,0), (0.915904, 0.476723), (0.717436, 0.717436),
    // (0.476723, 0.915904), (0,1).
    EXPECT_NEAR(s.value, 0.7918071950724503, 1e-9);
}

TEST(Frontier, IdenticalHistogramsScoreOne) {
    const std::vector<double> h{0.1, 0.6, 0.3};
    EXPECT_NEAR(frontier_from_histograms(h, h, interior_mixture_grid(25), 5.0).value, 1.0, 1e-12);
}

TEST(Frontier, DisjointHistogramsScoreNearZero) {
    const auto s = frontier_from_histograms(std::vector<double>{0.5, 0.5, 0.0, 0.0},
                                            std::vector<double>{0.0, 0.0, 0.4, 0.6}, interior_mixture_grid(25), 5.0);
    EXPECT_LT(s.value, 0.05);
    EXPECT_GT(s.value, 0.0);
}

TEST(Frontier, IdenticalFeatureMultisetsScoreOne) {
    std::mt19937_64 gen(2);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::vector<double>> feats(60, std::vector<double>(3));
    for (auto& f : feats) {
        for (auto& x : f) x = n(gen);
    }
    auto shuffled = feats;
    std::shuffle(shuffled.begin(), shuffled.end(), gen);
    const auto s = frontier_score(feats, shuffled, FrontierOptions{.num_bins = 6, .seed = 3});
    EXPECT_NEAR(s.value, 1.0, 1e-6);
    EXPECT_EQ(s.curve.size(), 27u);
}

TEST(Frontier, SeparatedFeaturesScoreLowAndDeterministically) {
    std::vector<std::vector<double>> p, q;
    for (int i = 0; i < 30; ++i) {
        p.push_back({0.0 + 0.01 * i, 0.0});
        q.push_back({100.0 + 0.01 * i, 100.0});
    }
    const FrontierOptions opt{.num_bins = 2, .scaling_constant = 5.0, .seed = 11};
    const auto a = frontier_score(p, q, opt);
    EXPECT_LT(a.value, 0.05);
    EXPECT_EQ(frontier_score(p, q, opt).value, a.value);
    // Swapping sides mirrors the curve; identical inputs still give 1.
    const auto b = frontier_score(q, p, opt);
    EXPECT_GT(b.value, 0.0);
    EXPECT_LE(b.value, 1.0);
    EXPECT_NEAR(frontier_score(q, q, opt).value, 1.0, 1e-6);
}

TEST(Frontier, BinsClampedToSampleCount) {
    const std::vector<std::vector<double>> p{{0.0}, {1.0}};
    const std::vector<std::vector<double>> q{{2.0}};
    const auto s = frontier_score(p, q, FrontierOptions{.num_bins = 16});
    EXPECT_TRUE(s.bins_clamped);
    EXPECT_EQ(s.num_bins, 3u);
    EXPECT_THROW(frontier_score({}, q, FrontierOptions{}), InputError);
    EXPECT_THROW(frontier_score(p, {{1.0, 2.0}}, FrontierOptions{}), InputError);
}

TEST(KMeans, DeterministicAndSeparatesClusters) {
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 10; ++i) pts.push_back({double(i % 3) * 0.1, 0.0});
    for (int i = 0; i < 10; ++i) pts.push_back({50.0 + double(i % 3) * 0.1, 0.0});
    const auto a = kmeans(pts, 2, 5, 100);
    const auto b = kmeans(pts, 2, 5, 100);
    EXPECT_EQ(a.assignment, b.assignment);
    EXPECT_EQ(a.centroids, b.centroids);
    for (int i = 1; i < 10; ++i) EXPECT_EQ(a.assignment[static_cast<std::size_t>(i)], a.assignment[0]);
    EXPECT_NE(a.assignment[0], a.assignment[10]);
    EXPECT_LE(a.iterations, 100u);
}

TEST(KMeans, DuplicatePointsTieToLowestCluster) {
    const std::vector<std::vector<double>> pts(5, std::vector<double>{1.0, 1.0});
    const auto r = kmeans(pts, 3, 0, 100);
    for (auto c : r.assignment) EXPECT_EQ(c, 0u);
}

TEST(Features, BigramHashingAndMeanRepresentation) {
    const auto f = bigram_features(std::vector<TokenId>{0, 1, 0, 1}, 3, 16);
    ASSERT_EQ(f.size(), 16u);
    EXPECT_EQ(f[1], 2.0);  // (0,1) -> 0 * 3 + 1
    EXPECT_EQ(f[3], 1.0);  // (1,0) -> 1 * 3 + 0
    EXPECT_EQ(std::accumulate(f.begin(), f.end(), 0.0), 3.0);

    TableModel m(Vocabulary::make(2), 0, {{{}, {0.5, 0.5}}}, {{{1.0, 0.0}, {0.0, 3.0}}});
    EXPECT_EQ(mean_representation_features(m, std::vector<TokenId>{0, 1, 1, 1}), (std::vector<double>{0.25, 2.25}));
}

// ---------------------------------------------------------------------------
// Sign test

TEST(SignTest, TableExamples) {
    const auto ten_zero = sign_test_counts(10, 0, 0);
    EXPECT_EQ(ten_zero.p_value, 0.001953125);
    EXPECT_TRUE(ten_zero.significant);
    const auto even = sign_test_counts(5, 5, 0);
    EXPECT_EQ(even.p_value, 1.0);
    EXPECT_FALSE(even.significant);
    // 2 (1 + 10 + 45 + 120 + 210) / 1024 = 772 / 1024.
    const auto six_four = sign_test_counts(6, 4, 3);
    EXPECT_EQ(six_four.p_value, 772.0 / 1024.0);
    EXPECT_EQ(six_four.neutrals, 3u);
}

TEST(SignTest, MatchesEnumerationOracleExactly) {
    for (std::size_t n = 1; n <= 20; ++n) {
        for (std::size_t a = 0; a <= n; ++a) {
            const auto r = sign_test_counts(a, n - a, 0);
            const double want = oracle_sign_test_p(a, n - a);
            ASSERT_EQ(r.p_value, want) << a << "-" << n - a;
            EXPECT_EQ(r.significant, want < 0.05);
        }
    }
}

TEST(SignTest, LargeCountsStayInRange) {
    const double p = binomial_two_sided_p(100, 200);
    EXPECT_EQ(p, 1.0);
    const double q = binomial_two_sided_p(70, 200);
    EXPECT_GT(q, 0.0);
    EXPECT_LT(q, 1e-4);
    EXPECT_NEAR(binomial_two_sided_p(0, 100) / std::ldexp(1.0, -99), 1.0, 1e-9);
}

TEST(SignTest, ComparisonsExcludeNeutrals) {
    std::vector<PairwiseComparison> cs;
    for (int i = 0; i < 6; ++i) cs.push_back({std::to_string(i), "a", "b", Verdict::AWins});
    for (int i = 0; i < 4; ++i) cs.push_back({"b" + std::to_string(i), "a", "b", Verdict::BWins});
    for (int i = 0; i < 3; ++i) cs.push_back({"n" + std::to_string(i), "a", "b", Verdict::Neutral});
    const auto r = sign_test(cs);
    EXPECT_EQ(r.wins_a, 6u);
    EXPECT_EQ(r.wins_b, 4u);
    EXPECT_EQ(r.neutrals, 3u);
    EXPECT_EQ(r.p_value, sign_test_counts(6, 4, 0).p_value);
}

TEST(SignTest, AllNeutralIsUndefined) {
    std::vector<PairwiseComparison> cs{{"1", "a", "b", Verdict::Neutral}};
    EXPECT_THROW(sign_test(cs), UndefinedResultError);
    EXPECT_THROW(sign_test_counts(0, 0, 4), UndefinedResultError);
}
