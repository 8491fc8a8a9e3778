#include "decodekit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "decodekit/decoding.hpp"

namespace decodekit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> normalized_histogram(const std::vector<std::size_t>& assignment, std::size_t begin,
                                         std::size_t end, std::size_t bins) {
    std::vector<double> h(bins, 0.0);
    for (std::size_t i = begin; i < end; ++i) h[assignment[i]] += 1.0;
    const double n = static_cast<double>(end - begin);
    for (double& x : h) x /= n;
    return h;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double t = a[i] - b[i];
        d += t * t;
    }
    return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// rep-n / diversity

std::optional<double> rep_n(std::span<const TokenId> text, std::size_t n) {
    if (n < 1) throw InputError("n-gram order must be positive");
    if (text.size() < n) return std::nullopt;
    const std::size_t total = text.size() - n + 1;
    std::vector<std::span<const TokenId>> grams;
    grams.reserve(total);
    for (std::size_t i = 0; i < total; ++i) grams.push_back(text.subspan(i, n));
    auto less = [](std::span<const TokenId> a, std::span<const TokenId> b) {
        return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
    };
    auto eq = [](std::span<const TokenId> a, std::span<const TokenId> b) { return std::equal(a.begin(), a.end(), b.begin()); };
    std::sort(grams.begin(), grams.end(), less);
    const auto unique = static_cast<std::size_t>(std::unique(grams.begin(), grams.end(), eq) - grams.begin());
    return 100.0 * (1.0 - static_cast<double>(unique) / static_cast<double>(total));
}

DiversityReport diversity(std::span<const TokenId> text) {
    DiversityReport r;
    double product = 1.0;
    bool complete = true;
    for (std::size_t n = 2; n <= 4; ++n) {
        r.rep[n - 2] = rep_n(text, n);
        if (r.rep[n - 2]) {
            product *= 1.0 - *r.rep[n - 2] / 100.0;
        } else {
            complete = false;
        }
    }
    if (complete) r.diversity = product;
    return r;
}

nlohmann::json DiversityReport::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"rep_2", opt(rep[0])}, {"rep_3", opt(rep[1])}, {"rep_4", opt(rep[2])},
            {"diversity", opt(diversity)}, {"too_short", too_short()}};
}

// ---------------------------------------------------------------------------
// Coherence

CoherenceScore coherence(const LanguageModel& scorer, std::span<const TokenId> prompt,
                         std::span<const TokenId> continuation) {
    const ScoredSequence scored = scorer.score(prompt, continuation);
    CoherenceScore out;
    out.token_count = scored.logprobs.size();
    out.degenerate = scored.has_zero_probability;
    if (out.degenerate) {
        out.value = -kInf;
        return out;
    }
    // Running mean: exact when every term is equal.
    double mean = 0.0;
    for (std::size_t i = 0; i < scored.logprobs.size(); ++i) {
        mean += (scored.logprobs[i] - mean) / static_cast<double>(i + 1);
    }
    out.value = mean;
    return out;
}

// ---------------------------------------------------------------------------
// Divergence frontier

std::vector<TokenId> truncate_for_frontier(std::span<const TokenId> text, std::size_t limit) {
    const auto n = std::min(text.size(), limit);
    return {text.begin(), text.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<double> interior_mixture_grid(std::size_t points) {
    std::vector<double> w(points);
    for (std::size_t i = 0; i < points; ++i) w[i] = static_cast<double>(i + 1) / static_cast<double>(points + 1);
    return w;
}

double kl_divergence(std::span<const double> p, std::span<const double> r) {
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (r[i] <= 0.0) return kInf;
        kl += p[i] * std::log(p[i] / r[i]);
    }
    return std::max(kl, 0.0);
}

FrontierScore frontier_from_histograms(std::span<const double> p_hist, std::span<const double> q_hist,
                                       std::span<const double> interior_weights, double scaling_constant) {
    if (p_hist.size() != q_hist.size() || p_hist.empty()) {
        throw InputError("frontier histograms must be non-empty and share their bins");
    }
    if (!(scaling_constant > 0.0)) throw InputError("scaling constant must be positive");
    FrontierScore out;
    out.num_bins = p_hist.size();
    out.scaling_constant = scaling_constant;
    out.mixture_weights.push_back(0.0);
    out.curve.emplace_back(1.0, 0.0);
    std::vector<double> mix(p_hist.size());
    for (double w : interior_weights) {
        if (!(w > 0.0 && w < 1.0)) throw InputError("mixture weights must lie strictly inside (0, 1)");
        for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = w * p_hist[i] + (1.0 - w) * q_hist[i];
        out.mixture_weights.push_back(w);
        out.curve.emplace_back(std::exp(-scaling_constant * kl_divergence(q_hist, mix)),
                               std::exp(-scaling_constant * kl_divergence(p_hist, mix)));
    }
    out.mixture_weights.push_back(1.0);
    out.curve.emplace_back(0.0, 1.0);

    double area = 0.0;
    for (std::size_t i = 0; i + 1 < out.curve.size(); ++i) {
        const auto [x0, y0] = out.curve[i];
        const auto [x1, y1] = out.curve[i + 1];
        area += (x0 - x1) * (y0 + y1) / 2.0;
    }
    out.value = std::clamp(std::abs(area), 0.0, 1.0);
    return out;
}

KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t clusters, std::uint64_t seed,
                    std::size_t max_iterations) {
    const std::size_t n = points.size();
    if (n == 0) throw InputError("k-means needs at least one point");
    if (clusters < 1 || clusters > n) throw InputError("k-means cluster count must be in [1, #points]");
    const std::size_t dim = points.front().size();
    for (const auto& p : points) {
        if (p.size() != dim) throw InputError("feature vectors must share one dimension");
    }

    // Partial Fisher-Yates over indices picks `clusters` distinct seeds.
    SampleStream rng(seed);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < clusters; ++i) {
        const auto span = n - i;
        const auto j = i + std::min(span - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(span)));
        std::swap(idx[i], idx[j]);
    }
    KMeansResult r;
    r.centroids.reserve(clusters);
    for (std::size_t c = 0; c < clusters; ++c) r.centroids.push_back(points[idx[c]]);
    r.assignment.assign(n, 0);

    std::vector<std::size_t> counts(clusters);
    for (std::size_t iter = 0; iter < max_iterations; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = squared_distance(points[i], r.centroids[0]);
            for (std::size_t c = 1; c < clusters; ++c) {
                const double d = squared_distance(points[i], r.centroids[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (iter == 0 || r.assignment[i] != best) changed = true;
            r.assignment[i] = best;
        }
        r.iterations = iter + 1;
        if (!changed) break;
        std::vector<std::vector<double>> sums(clusters, std::vector<double>(dim, 0.0));
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto& s = sums[r.assignment[i]];
            for (std::size_t d = 0; d < dim; ++d) s[d] += points[i][d];
            ++counts[r.assignment[i]];
        }
        for (std::size_t c = 0; c < clusters; ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t d = 0; d < dim; ++d) r.centroids[c][d] = sums[c][d] / static_cast<double>(counts[c]);
        }
    }
    return r;
}

FrontierScore frontier_score(const std::vector<std::vector<double>>& p_features,
                             const std::vector<std::vector<double>>& q_features, const FrontierOptions& options) {
    if (p_features.empty() || q_features.empty()) throw InputError("frontier score needs features on both sides");
    if (options.num_bins < 1) throw InputError("frontier score needs at least one bin");
    std::vector<std::vector<double>> all;
    all.reserve(p_features.size() + q_features.size());
    all.insert(all.end(), p_features.begin(), p_features.end());
    all.insert(all.end(), q_features.begin(), q_features.end());
    const std::size_t bins = std::min(options.num_bins, all.size());
    const KMeansResult km = kmeans(all, bins, options.seed, options.max_iterations);
    const auto p_hist = normalized_histogram(km.assignment, 0, p_features.size(), bins);
    const auto q_hist = normalized_histogram(km.assignment, p_features.size(), all.size(), bins);
    FrontierScore out = frontier_from_histograms(p_hist, q_hist, interior_mixture_grid(options.grid_points),
                                                 options.scaling_constant);
    out.bins_clamped = bins < options.num_bins;
    return out;
}

nlohmann::json FrontierScore::to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (std::size_t i = 0; i < curve.size(); ++i) {
        pts.push_back({mixture_weights[i], curve[i].first, curve[i].second});
    }
    return {{"value", value},
            {"num_bins", num_bins},
            {"scaling_constant", scaling_constant},
            {"bins_clamped", bins_clamped},
            {"curve", std::move(pts)}};
}

std::vector<double> bigram_features(std::span<const TokenId> text, std::size_t vocab_size, std::size_t dim) {
    if (dim < 1) throw InputError("feature dimension must be positive");
    std::vector<double> f(dim, 0.0);
    for (std::size_t i = 1; i < text.size(); ++i) {
        const auto a = static_cast<std::uint64_t>(text[i - 1]);
        const auto b = static_cast<std::uint64_t>(text[i]);
        f[(a * vocab_size + b) % dim] += 1.0;
    }
    return f;
}

std::vector<double> mean_representation_features(const LanguageModel& scorer, std::span<const TokenId> text) {
    if (text.empty()) return std::vector<double>(scorer.representation_dim(), 0.0);
    const StepOutput out = scorer.step(text);
    std::vector<double> mean(out.representations.dim(), 0.0);
    for (std::size_t i = 0; i < out.representations.rows(); ++i) {
        const auto row = out.representations.row(i);
        for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += row[d];
    }
    for (double& m : mean) m /= static_cast<double>(out.representations.rows());
    return mean;
}

// ---------------------------------------------------------------------------
// Sign test

std::string to_string(Verdict v) {
    switch (v) {
        case Verdict::AWins:
            return "a";
        case Verdict::BWins:
            return "b";
        case Verdict::Neutral:
            return "neutral";
    }
    return "neutral";
}

double binomial_two_sided_p(std::size_t successes, std::size_t trials) {
    if (successes > trials) throw InputError("more successes than trials");
    if (trials == 0) throw UndefinedResultError("sign test needs at least one decisive comparison");
    const std::size_t tail = std::min(successes, trials - successes);
    if (trials <= 62) {
        // Exact integer tail sum; C(n, i) stays below 2^62 here.
        std::uint64_t coef = 1;
        std::uint64_t sum = 0;
        for (std::size_t i = 0; i <= tail; ++i) {
            if (i > 0) coef = coef * (trials - i + 1) / i;
            sum += coef;
        }
        return std::min(1.0, std::ldexp(static_cast<double>(sum), 1 - static_cast<int>(trials)));
    }
    long double log_coef = 0.0L;
    long double acc = 0.0L;
    const long double log_half_n = static_cast<long double>(trials) * std::log(0.5L);
    for (std::size_t i = 0; i <= tail; ++i) {
        if (i > 0) log_coef += std::log(static_cast<long double>(trials - i + 1)) - std::log(static_cast<long double>(i));
        acc += std::exp(log_coef + log_half_n);
    }
    return std::min(1.0, static_cast<double>(2.0L * acc));
}

SignTestResult sign_test_counts(std::size_t wins_a, std::size_t wins_b, std::size_t neutrals) {
    if (wins_a + wins_b == 0) throw UndefinedResultError("sign test is undefined when every comparison is neutral");
    SignTestResult r{wins_a, wins_b, neutrals, binomial_two_sided_p(wins_a, wins_a + wins_b), false};
    r.significant = r.p_value < kSignificanceLevel;
    return r;
}

SignTestResult sign_test(std::span<const PairwiseComparison> comparisons) {
    std::size_t a = 0;
    std::size_t b = 0;
    std::size_t neutral = 0;
    for (const auto& c : comparisons) {
        switch (c.verdict) {
            case Verdict::AWins:
                ++a;
                break;
            case Verdict::BWins:
                ++b;
                break;
            case Verdict::Neutral:
                ++neutral;
                break;
        }
    }
    return sign_test_counts(a, b, neutral);
}

nlohmann::json SignTestResult::to_json() const {
    return {{"wins_a", wins_a}, {"wins_b", wins_b}, {"neutrals", neutrals}, {"p_value", p_value},
            {"significant", significant}, {"alpha", kSignificanceLevel}};
}

}  // namespace decodekit
