#pragma once

// Brute-force reference implementations. They read the model tables directly
// and enumerate every token instead of ranking, so they share no code path
// with the library's decoders beyond the arithmetic of the objectives.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "decodekit/lm_interface.hpp"

namespace decodekit::testing {

/// Longest context suffix (up to the model order) that has a row.
inline const std::vector<double>& oracle_row(const TableModel& m, std::span<const TokenId> ctx) {
    for (std::size_t len = std::min(m.order(), ctx.size()) + 1; len-- > 0;) {
        std::vector<TokenId> key(ctx.end() - static_cast<std::ptrdiff_t>(len), ctx.end());
        auto it = m.rows().find(key);
        if (it != m.rows().end()) return it->second;
    }
    return m.rows().at({});
}

inline const std::vector<double>& oracle_repr(const TableModel& m, std::size_t position, TokenId t) {
    const auto& table = m.representation_table();
    return table[position % table.size()][static_cast<std::size_t>(t)];
}

inline double oracle_cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// v is among the k most probable tokens iff fewer than k tokens beat it,
/// where u beats v when p(u) > p(v), or p(u) == p(v) and u < v.
inline bool oracle_in_topk(const std::vector<double>& dist, std::size_t v, std::size_t k) {
    std::size_t better = 0;
    for (std::size_t u = 0; u < dist.size(); ++u) {
        if (dist[u] > dist[v] || (dist[u] == dist[v] && u < v)) ++better;
    }
    return better < k;
}

/// (1 - alpha) p(v) - alpha max_j cos(h_v, h_j), maximized over the top k
/// tokens that have nonzero probability.
inline TokenId oracle_contrastive_search(const TableModel& m, std::span<const TokenId> ctx, std::size_t k,
                                         double alpha) {
    const auto& dist = oracle_row(m, ctx);
    TokenId best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < dist.size(); ++v) {
        if (dist[v] == 0.0 || !oracle_in_topk(dist, v, k)) continue;
        const auto& h_v = oracle_repr(m, ctx.size(), static_cast<TokenId>(v));
        double penalty = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < ctx.size(); ++j) {
            penalty = std::max(penalty, oracle_cosine(h_v, oracle_repr(m, j, ctx[j])));
        }
        const double score = (1.0 - alpha) * dist[v] - alpha * penalty;
        if (best < 0 || score > best_score) {
            best = static_cast<TokenId>(v);
            best_score = score;
        }
    }
    return best;
}

/// log p_expert(v) - log p_amateur(v; tau) over { v : p_expert(v) >= alpha max p_expert }.
inline TokenId oracle_contrastive_decoding(const std::vector<double>& expert, const std::vector<double>& amateur,
                                           double alpha, double tau) {
    const double inf = std::numeric_limits<double>::infinity();
    double max_p = 0.0;
    for (double p : expert) max_p = std::max(max_p, p);
    std::vector<double> amateur_lp(amateur.size());
    for (std::size_t v = 0; v < amateur.size(); ++v) amateur_lp[v] = amateur[v] > 0.0 ? std::log(amateur[v]) : -inf;
    if (tau != 1.0) {
        double top = -inf;
        for (auto& l : amateur_lp) {
            l /= tau;
            top = std::max(top, l);
        }
        double z = 0.0;
        for (double l : amateur_lp) z += std::exp(l - top);
        const double log_z = top + std::log(z);
        for (auto& l : amateur_lp) l -= log_z;
    }
    TokenId best = -1;
    double best_score = -inf;
    for (std::size_t v = 0; v < expert.size(); ++v) {
        if (!(expert[v] >= alpha * max_p)) continue;
        const double score = std::isinf(amateur_lp[v]) ? inf : std::log(expert[v]) - amateur_lp[v];
        if (best < 0 || score > best_score) {
            best = static_cast<TokenId>(v);
            best_score = score;
        }
    }
    return best;
}

/// 100 (1 - unique / total) by listing every n-gram into a set.
inline double oracle_rep_n(const std::vector<TokenId>& text, std::size_t n) {
    std::set<std::vector<TokenId>> unique;
    std::size_t total = 0;
    for (std::size_t i = 0; i + n <= text.size(); ++i) {
        unique.insert(std::vector<TokenId>(text.begin() + static_cast<std::ptrdiff_t>(i),
                                           text.begin() + static_cast<std::ptrdiff_t>(i + n)));
        ++total;
    }
    return 100.0 * (1.0 - static_cast<double>(unique.size()) / static_cast<double>(total));
}

/// Two-sided sign-test p-value by enumerating all 2^n win/loss sequences and
/// counting those at least as extreme as the observed split.
inline double oracle_sign_test_p(std::size_t wins_a, std::size_t wins_b) {
    const std::size_t n = wins_a + wins_b;
    const std::size_t observed = std::min(wins_a, wins_b);
    std::uint64_t extreme = 0;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        const auto a = static_cast<std::size_t>(__builtin_popcountll(mask));
        if (a <= observed) ++extreme;
    }
    const double tail = static_cast<double>(extreme) / std::ldexp(1.0, static_cast<int>(n));
    return std::min(1.0, 2.0 * tail);
}

}  // namespace decodekit::testing
