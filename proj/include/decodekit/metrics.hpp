#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "decodekit/lm_interface.hpp"

namespace decodekit {

// ---------------------------------------------------------------------------
// Repetition and diversity

/// 100 * (1 - unique n-grams / total n-grams); nullopt when text is shorter than n.
std::optional<double> rep_n(std::span<const TokenId> text, std::size_t n);

struct DiversityReport {
    /// rep-2, rep-3, rep-4 as percentages; nullopt for n-gram orders the text is too short for.
    std::array<std::optional<double>, 3> rep{};
    /// prod over n = 2..4 of (1 - rep_n / 100); nullopt unless all three are defined.
    std::optional<double> diversity;

    bool too_short() const noexcept { return !diversity.has_value(); }
    std::optional<double> rep_at(std::size_t n) const { return rep.at(n - 2); }
    nlohmann::json to_json() const;
};

DiversityReport diversity(std::span<const TokenId> text);

// ---------------------------------------------------------------------------
// Coherence

struct CoherenceScore {
    double value = 0.0;          // mean log-probability; -inf when degenerate
    std::size_t token_count = 0;
    bool degenerate = false;     // some token had zero probability under the scorer
};

/// Mean of log p(continuation[i] | prompt ++ continuation[..i]) under `scorer`.
CoherenceScore coherence(const LanguageModel& scorer, std::span<const TokenId> prompt,
                         std::span<const TokenId> continuation);

// ---------------------------------------------------------------------------
// Divergence frontier

inline constexpr std::size_t kFrontierTruncation = 128;

/// First min(len, limit) tokens.
std::vector<TokenId> truncate_for_frontier(std::span<const TokenId> text, std::size_t limit = kFrontierTruncation);

struct FrontierOptions {
    std::size_t num_bins = 16;
    double scaling_constant = 5.0;
    std::size_t grid_points = 25;
    std::uint64_t seed = 0;
    std::size_t max_iterations = 100;
};

struct FrontierScore {
    double value = 0.0;
    std::size_t num_bins = 0;
    double scaling_constant = 0.0;
    /// Mixture weights of the curve points, endpoints 0 and 1 included.
    std::vector<double> mixture_weights;
    /// (exp(-c KL(Q || R)), exp(-c KL(P || R))) per mixture weight, R = w P + (1 - w) Q.
    std::vector<std::pair<double, double>> curve;
    /// Set when there were fewer samples than requested bins.
    bool bins_clamped = false;

    nlohmann::json to_json() const;
};

/// `points` evenly spaced weights strictly inside (0, 1): i / (points + 1).
std::vector<double> interior_mixture_grid(std::size_t points);

/// KL(p || r) over entries with p > 0; +inf when r is zero where p is not.
double kl_divergence(std::span<const double> p, std::span<const double> r);

/// Frontier area for two normalized histograms over the same bins and the
/// given interior mixture weights. The curve is closed with the points (1, 0)
/// at weight 0 and (0, 1) at weight 1, and the area is taken by the
/// trapezoid rule along the curve.
FrontierScore frontier_from_histograms(std::span<const double> p_hist, std::span<const double> q_hist,
                                       std::span<const double> interior_weights, double scaling_constant);

struct KMeansResult {
    std::vector<std::size_t> assignment;
    std::vector<std::vector<double>> centroids;
    std::size_t iterations = 0;
};

/// Lloyd's algorithm seeded by sampling `clusters` distinct points. Ties in
/// assignment go to the lowest cluster index; empty clusters keep their centroid.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t clusters, std::uint64_t seed,
                    std::size_t max_iterations);

/// Quantizes the union of both feature sets and scores their histograms.
/// `p_features` is the reference (human) side, `q_features` the generated side.
FrontierScore frontier_score(const std::vector<std::vector<double>>& p_features,
                             const std::vector<std::vector<double>>& q_features, const FrontierOptions& options);

// Feature extractors for frontier_score.
inline constexpr const char* kBigramFeatures = "bigram";
inline constexpr const char* kMeanRepresentationFeatures = "scorer-mean-repr";

/// Counts of (a, b) bigrams hashed into `dim` buckets by (a * V + b) mod dim.
std::vector<double> bigram_features(std::span<const TokenId> text, std::size_t vocab_size, std::size_t dim = 1024);

/// Mean of the scorer's per-token representations of `text`.
std::vector<double> mean_representation_features(const LanguageModel& scorer, std::span<const TokenId> text);

// ---------------------------------------------------------------------------
// Pairwise preference and sign test

enum class Verdict { AWins, BWins, Neutral };

std::string to_string(Verdict v);

struct PairwiseComparison {
    std::string prompt_id;
    std::string system_a;
    std::string system_b;
    Verdict verdict = Verdict::Neutral;
};

struct SignTestResult {
    std::size_t wins_a = 0;
    std::size_t wins_b = 0;
    std::size_t neutrals = 0;
    double p_value = 1.0;
    bool significant = false;

    nlohmann::json to_json() const;
};

inline constexpr double kSignificanceLevel = 0.05;

/// Exact two-sided binomial p-value for `successes` out of `trials` at 1/2:
/// min(1, 2 * P(X <= min(successes, trials - successes))).
double binomial_two_sided_p(std::size_t successes, std::size_t trials);

/// Neutrals are excluded. UndefinedResultError when no comparison is decisive.
SignTestResult sign_test(std::span<const PairwiseComparison> comparisons);
SignTestResult sign_test_counts(std::size_t wins_a, std::size_t wins_b, std::size_t neutrals);

}  // namespace decodekit
