#include "decodekit/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace decodekit {

namespace {

constexpr double kMassTolerance = 1e-12;
// Typical-sampling deviations closer than this are treated as equal.
constexpr double kDeviationResolution = 1e-12;

constexpr double kInf = std::numeric_limits<double>::infinity();

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void require_distribution(std::span<const double> dist) {
    if (dist.empty()) throw InputError("empty probability distribution");
}

double total_mass(std::span<const double> dist) { return std::accumulate(dist.begin(), dist.end(), 0.0); }

/// Shortest prefix of `order` whose mass reaches `fraction` of the total.
std::vector<TokenId> mass_prefix(std::span<const double> dist, const std::vector<TokenId>& order, double fraction) {
    const double total = total_mass(dist);
    const double target = fraction * total - kMassTolerance * total;
    std::vector<TokenId> out;
    double cum = 0.0;
    for (TokenId t : order) {
        out.push_back(t);
        cum += dist[static_cast<std::size_t>(t)];
        if (cum >= target) break;
    }
    return out;
}

bool better(double score, TokenId id, double best_score, TokenId best_id) {
    return score > best_score || (score == best_score && id < best_id);
}

}  // namespace

// ---------------------------------------------------------------------------
// DecodeSpec

void validate(const DecodeSpec& spec) {
    std::visit(overloaded{
                   [](const Greedy&) {},
                   [](const TopK& s) {
                       if (s.k < 1) throw InputError("top-k requires k >= 1");
                   },
                   [](const Nucleus& s) {
                       if (!(s.p > 0.0 && s.p <= 1.0)) throw InputError("nucleus requires 0 < p <= 1");
                   },
                   [](const Typical& s) {
                       if (!(s.tau > 0.0 && s.tau <= 1.0)) throw InputError("typical requires 0 < tau <= 1");
                   },
                   [](const ContrastiveDecoding& s) {
                       if (!(s.alpha > 0.0 && s.alpha <= 1.0)) {
                           throw InputError("contrastive decoding requires 0 < alpha <= 1");
                       }
                       if (!(s.amateur_temperature > 0.0) || !std::isfinite(s.amateur_temperature)) {
                           throw InputError("contrastive decoding requires a positive amateur temperature");
                       }
                   },
                   [](const ContrastiveSearch& s) {
                       if (s.k < 1) throw InputError("contrastive search requires k >= 1");
                       if (!(s.alpha >= 0.0 && s.alpha <= 1.0)) {
                           throw InputError("contrastive search requires 0 <= alpha <= 1");
                       }
                   },
               },
               spec);
}

std::string strategy_name(const DecodeSpec& spec) {
    return std::visit(overloaded{
                          [](const Greedy&) { return std::string("greedy"); },
                          [](const TopK&) { return std::string("top-k"); },
                          [](const Nucleus&) { return std::string("nucleus"); },
                          [](const Typical&) { return std::string("typical"); },
                          [](const ContrastiveDecoding&) { return std::string("contrastive-decoding"); },
                          [](const ContrastiveSearch&) { return std::string("contrastive-search"); },
                      },
                      spec);
}

bool needs_amateur(const DecodeSpec& spec) { return std::holds_alternative<ContrastiveDecoding>(spec); }

bool is_stochastic(const DecodeSpec& spec) {
    return std::holds_alternative<TopK>(spec) || std::holds_alternative<Nucleus>(spec) ||
           std::holds_alternative<Typical>(spec);
}

nlohmann::json to_json(const DecodeSpec& spec) {
    nlohmann::json j{{"strategy", strategy_name(spec)}};
    std::visit(overloaded{
                   [](const Greedy&) {},
                   [&](const TopK& s) { j["k"] = s.k; },
                   [&](const Nucleus& s) { j["p"] = s.p; },
                   [&](const Typical& s) { j["tau"] = s.tau; },
                   [&](const ContrastiveDecoding& s) {
                       j["alpha"] = s.alpha;
                       j["amateur_temperature"] = s.amateur_temperature;
                   },
                   [&](const ContrastiveSearch& s) {
                       j["k"] = s.k;
                       j["alpha"] = s.alpha;
                   },
               },
               spec);
    return j;
}

DecodeSpec decode_spec_from_json(const nlohmann::json& j) {
    DecodeSpec spec;
    try {
        const std::string name = j.at("strategy").get<std::string>();
        if (name == "greedy") {
            spec = Greedy{};
        } else if (name == "top-k") {
            spec = TopK{j.value("k", TopK{}.k)};
        } else if (name == "nucleus") {
            spec = Nucleus{j.value("p", Nucleus{}.p)};
        } else if (name == "typical") {
            spec = Typical{j.value("tau", Typical{}.tau)};
        } else if (name == "contrastive-decoding") {
            spec = ContrastiveDecoding{j.value("alpha", ContrastiveDecoding{}.alpha),
                                       j.value("amateur_temperature", ContrastiveDecoding{}.amateur_temperature)};
        } else if (name == "contrastive-search") {
            spec = ContrastiveSearch{j.value("k", ContrastiveSearch{}.k), j.value("alpha", ContrastiveSearch{}.alpha)};
        } else {
            throw InputError("unknown strategy \"" + name + "\"");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed strategy: ") + e.what());
    }
    validate(spec);
    return spec;
}

// ---------------------------------------------------------------------------
// Single-distribution rules

TokenId greedy_step(std::span<const double> dist) {
    require_distribution(dist);
    // max_element returns the first maximum, i.e. the lowest id among ties.
    return static_cast<TokenId>(std::max_element(dist.begin(), dist.end()) - dist.begin());
}

std::vector<TokenId> rank_by_probability(std::span<const double> dist) {
    std::vector<TokenId> order(dist.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
        return dist[static_cast<std::size_t>(a)] > dist[static_cast<std::size_t>(b)];
    });
    return order;
}

std::vector<TokenId> topk_support(std::span<const double> dist, std::size_t k) {
    require_distribution(dist);
    if (k < 1) throw InputError("top-k requires k >= 1");
    k = std::min(k, dist.size());
    std::vector<TokenId> order(dist.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](TokenId a, TokenId b) {
                          const double pa = dist[static_cast<std::size_t>(a)];
                          const double pb = dist[static_cast<std::size_t>(b)];
                          return pa > pb || (pa == pb && a < b);
                      });
    order.resize(k);
    return order;
}

std::vector<TokenId> nucleus_support(std::span<const double> dist, double p) {
    require_distribution(dist);
    if (!(p > 0.0 && p <= 1.0)) throw InputError("nucleus requires 0 < p <= 1");
    return mass_prefix(dist, rank_by_probability(dist), p);
}

std::vector<TokenId> typical_support(std::span<const double> dist, double tau) {
    require_distribution(dist);
    if (!(tau > 0.0 && tau <= 1.0)) throw InputError("typical requires 0 < tau <= 1");
    double entropy = 0.0;
    for (double p : dist) {
        if (p > 0.0) entropy -= p * std::log(p);
    }
    struct Ranked {
        TokenId id;
        long long key;
    };
    std::vector<Ranked> ranked;
    for (std::size_t v = 0; v < dist.size(); ++v) {
        if (dist[v] > 0.0) {
            const double deviation = std::abs(-std::log(dist[v]) - entropy);
            ranked.push_back({static_cast<TokenId>(v), std::llround(deviation / kDeviationResolution)});
        }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.key < b.key; });
    std::vector<TokenId> order;
    order.reserve(ranked.size());
    for (const auto& r : ranked) order.push_back(r.id);
    return mass_prefix(dist, order, tau);
}

TokenId sample_from_support(std::span<const double> dist, std::span<const TokenId> support, SampleStream& rng) {
    if (support.empty()) throw InputError("cannot sample from an empty support");
    double total = 0.0;
    for (TokenId t : support) total += dist[static_cast<std::size_t>(t)];
    if (!(total > 0.0)) throw InputError("support has zero probability mass");
    const double target = rng.uniform() * total;
    double cum = 0.0;
    TokenId last_positive = support.front();
    for (TokenId t : support) {
        const double p = dist[static_cast<std::size_t>(t)];
        if (p <= 0.0) continue;
        last_positive = t;
        cum += p;
        if (target < cum) return t;
    }
    return last_positive;
}

TokenId topk_sample_step(std::span<const double> dist, std::size_t k, SampleStream& rng) {
    const auto support = topk_support(dist, k);
    return sample_from_support(dist, support, rng);
}

TokenId nucleus_sample_step(std::span<const double> dist, double p, SampleStream& rng) {
    const auto support = nucleus_support(dist, p);
    return sample_from_support(dist, support, rng);
}

TokenId typical_sample_step(std::span<const double> dist, double tau, SampleStream& rng) {
    const auto support = typical_support(dist, tau);
    return sample_from_support(dist, support, rng);
}

// ---------------------------------------------------------------------------
// Contrastive decoding

nlohmann::json StepTrace::to_json() const {
    nlohmann::json j{{"step", step}, {"strategy", strategy}, {"candidates", candidates}, {"chosen", chosen}};
    auto put = [&](const char* key, const std::vector<double>& v) {
        if (v.empty()) return;
        nlohmann::json arr = nlohmann::json::array();
        for (double x : v) arr.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(x > 0 ? "inf" : "-inf"));
        j[key] = std::move(arr);
    };
    put("confidence", confidence);
    put("penalty", penalty);
    put("expert_logprob", expert_logprob);
    put("amateur_logprob", amateur_logprob);
    put("score", score);
    if (zero_norm_representation) j["zero_norm_representation"] = true;
    if (infinite_score) j["infinite_score"] = true;
    return j;
}

std::vector<TokenId> cd_candidate_set(std::span<const double> expert_dist, double alpha) {
    require_distribution(expert_dist);
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InputError("contrastive decoding requires 0 < alpha <= 1");
    const double threshold = alpha * *std::max_element(expert_dist.begin(), expert_dist.end());
    std::vector<TokenId> out;
    for (std::size_t v = 0; v < expert_dist.size(); ++v) {
        if (expert_dist[v] >= threshold) out.push_back(static_cast<TokenId>(v));
    }
    return out;
}

std::vector<double> temperature_scaled_logprobs(std::span<const double> dist, double temperature) {
    if (!(temperature > 0.0)) throw InputError("temperature must be positive");
    std::vector<double> out(dist.size());
    double max_logit = -kInf;
    for (std::size_t v = 0; v < dist.size(); ++v) {
        out[v] = dist[v] > 0.0 ? std::log(dist[v]) : -kInf;
        if (temperature != 1.0) out[v] /= temperature;
        max_logit = std::max(max_logit, out[v]);
    }
    if (temperature == 1.0 || !std::isfinite(max_logit)) return out;
    double acc = 0.0;
    for (double l : out) acc += std::exp(l - max_logit);
    const double log_norm = max_logit + std::log(acc);
    for (double& l : out) l -= log_norm;
    return out;
}

TokenId cd_select(std::span<const double> expert_dist, std::span<const double> amateur_dist, double alpha,
                  double amateur_temperature, StepTrace* trace) {
    if (expert_dist.size() != amateur_dist.size()) {
        throw InputError("expert and amateur distributions differ in size");
    }
    const auto candidates = cd_candidate_set(expert_dist, alpha);
    const auto amateur = temperature_scaled_logprobs(amateur_dist, amateur_temperature);
    TokenId best = candidates.front();
    double best_score = -kInf;
    bool infinite = false;
    if (trace) {
        trace->strategy = "contrastive-decoding";
        trace->candidates = candidates;
    }
    for (TokenId v : candidates) {
        const auto i = static_cast<std::size_t>(v);
        const double expert_lp = std::log(expert_dist[i]);
        const double amateur_lp = amateur[i];
        // Zero amateur probability makes the gap unbounded.
        const double s = std::isinf(amateur_lp) ? kInf : expert_lp - amateur_lp;
        infinite = infinite || std::isinf(s);
        if (v == candidates.front() || better(s, v, best_score, best)) {
            best_score = s;
            best = v;
        }
        if (trace) {
            trace->confidence.push_back(expert_dist[i]);
            trace->expert_logprob.push_back(expert_lp);
            trace->amateur_logprob.push_back(amateur_lp);
            trace->score.push_back(s);
        }
    }
    if (trace) {
        trace->chosen = best;
        trace->infinite_score = infinite;
    }
    return best;
}

TokenId cd_step(const LanguageModel& expert, const LanguageModel& amateur, std::span<const TokenId> context,
                double alpha, double amateur_temperature, StepTrace* trace) {
    if (expert.vocabulary().size != amateur.vocabulary().size) {
        throw InputError("expert and amateur models must share a vocabulary");
    }
    const StepOutput e = expert.step(context);
    const StepOutput a = amateur.step(context);
    return cd_select(e.distribution, a.distribution, alpha, amateur_temperature, trace);
}

// ---------------------------------------------------------------------------
// Contrastive search

double cosine_similarity(std::span<const double> a, std::span<const double> b, bool* zero_norm) {
    if (a.size() != b.size()) throw InputError("cosine similarity of vectors with different dimensions");
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        if (zero_norm) *zero_norm = true;
        return 0.0;
    }
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

TokenId cs_select(const LanguageModel& model, std::span<const TokenId> context, const StepOutput& out,
                  std::size_t k, double alpha, StepTrace* trace) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("contrastive search requires 0 <= alpha <= 1");
    // Tokens the model rules out are never candidates, even when k exceeds the support.
    auto candidates = topk_support(out.distribution, k);
    while (candidates.size() > 1 && !(out.distribution[static_cast<std::size_t>(candidates.back())] > 0.0)) {
        candidates.pop_back();
    }
    const auto& reprs = out.representations;
    if (reprs.rows() != context.size()) {
        throw ProtocolError("model returned representations that do not match the context length");
    }
    bool zero_norm = false;
    TokenId best = candidates.front();
    double best_score = -kInf;
    if (trace) {
        trace->strategy = "contrastive-search";
        trace->candidates = candidates;
    }
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        const TokenId v = candidates[c];
        const double confidence = out.distribution[static_cast<std::size_t>(v)];
        const std::vector<double> h_v = model.candidate_representation(context, v);
        double penalty = -kInf;
        for (std::size_t j = 0; j < reprs.rows(); ++j) {
            penalty = std::max(penalty, cosine_similarity(h_v, reprs.row(j), &zero_norm));
        }
        const double s = (1.0 - alpha) * confidence - alpha * penalty;
        if (c == 0 || better(s, v, best_score, best)) {
            best_score = s;
            best = v;
        }
        if (trace) {
            trace->confidence.push_back(confidence);
            trace->penalty.push_back(penalty);
            trace->score.push_back(s);
        }
    }
    if (trace) {
        trace->chosen = best;
        trace->zero_norm_representation = zero_norm;
    }
    return best;
}

TokenId cs_step(const LanguageModel& model, std::span<const TokenId> context, std::size_t k, double alpha,
                StepTrace* trace) {
    const StepOutput out = model.step(context);
    return cs_select(model, context, out, k, alpha, trace);
}

// ---------------------------------------------------------------------------
// Generation

std::string to_string(StopReason r) { return r == StopReason::EndOfDocument ? "eod" : "max_length"; }

StopReason stop_reason_from_string(const std::string& s) {
    if (s == "eod") return StopReason::EndOfDocument;
    if (s == "max_length") return StopReason::MaxLength;
    throw InputError("unknown stop reason \"" + s + "\"");
}

nlohmann::json GenerationRecord::to_json() const {
    return {{"prompt_id", prompt_id},
            {"prompt", prompt.tokens()},
            {"continuation", continuation.tokens()},
            {"spec", decodekit::to_json(spec)},
            {"seed", seed},
            {"stop_reason", to_string(stop_reason)}};
}

GenerationRecord GenerationRecord::from_json(const nlohmann::json& j, const Vocabulary& vocab) {
    try {
        return GenerationRecord{
            j.value("prompt_id", std::string{}),
            TokenSequence(vocab, j.at("prompt").get<std::vector<TokenId>>()),
            TokenSequence(vocab, j.at("continuation").get<std::vector<TokenId>>()),
            decode_spec_from_json(j.at("spec")),
            j.value("seed", std::uint64_t{0}),
            stop_reason_from_string(j.at("stop_reason").get<std::string>()),
        };
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed generation record: ") + e.what());
    }
}

GenerationRecord generate(const DecoderModels& models, const TokenSequence& prompt, const DecodeSpec& spec,
                          std::size_t max_length, std::uint64_t seed, const TraceSink& trace) {
    if (models.model == nullptr) throw InputError("generate requires a model");
    if (prompt.empty()) throw InputError("generate requires a non-empty prompt");
    if (max_length < 1) throw InputError("max_length must be at least 1");
    validate(spec);
    const LanguageModel& model = *models.model;
    const Vocabulary& vocab = model.vocabulary();
    if (prompt.vocabulary().size != vocab.size) throw InputError("prompt vocabulary does not match the model");
    if (needs_amateur(spec)) {
        if (models.amateur == nullptr) throw InputError("contrastive decoding requires an amateur model");
        if (models.amateur->vocabulary().size != vocab.size) {
            throw InputError("expert and amateur models must share a vocabulary");
        }
    }

    SampleStream rng(seed);
    std::vector<TokenId> context = prompt.tokens();
    std::vector<TokenId> continuation;
    continuation.reserve(max_length);
    StopReason reason = StopReason::MaxLength;

    while (continuation.size() < max_length) {
        StepTrace st;
        StepTrace* tp = trace ? &st : nullptr;
        TokenId next = -1;
        try {
            auto sample = [&](std::vector<TokenId> support, const std::vector<double>& dist) {
                const TokenId t = sample_from_support(dist, support, rng);
                if (tp) {
                    for (TokenId c : support) tp->confidence.push_back(dist[static_cast<std::size_t>(c)]);
                    tp->candidates = std::move(support);
                }
                return t;
            };
            next = std::visit(
                overloaded{
                    [&](const Greedy&) {
                        const auto dist = model.step(context).distribution;
                        const TokenId t = greedy_step(dist);
                        if (tp) {
                            tp->candidates = {t};
                            tp->confidence = {dist[static_cast<std::size_t>(t)]};
                        }
                        return t;
                    },
                    [&](const TopK& s) {
                        const auto dist = model.step(context).distribution;
                        return sample(topk_support(dist, s.k), dist);
                    },
                    [&](const Nucleus& s) {
                        const auto dist = model.step(context).distribution;
                        return sample(nucleus_support(dist, s.p), dist);
                    },
                    [&](const Typical& s) {
                        const auto dist = model.step(context).distribution;
                        return sample(typical_support(dist, s.tau), dist);
                    },
                    [&](const ContrastiveDecoding& s) {
                        return cd_step(model, *models.amateur, context, s.alpha, s.amateur_temperature, tp);
                    },
                    [&](const ContrastiveSearch& s) { return cs_step(model, context, s.k, s.alpha, tp); },
                },
                spec);
        } catch (const Error& e) {
            throw GenerationError(e.kind(), e.what(), continuation);
        } catch (const std::exception& e) {
            throw GenerationError(ErrorKind::Protocol, e.what(), continuation);
        }
        if (tp) {
            st.step = continuation.size();
            st.chosen = next;
            st.strategy = strategy_name(spec);
            trace(st);
        }
        continuation.push_back(next);
        context.push_back(next);
        if (vocab.is_eod(next)) {
            reason = StopReason::EndOfDocument;
            break;
        }
    }

    return GenerationRecord{std::string{},
                            prompt,
                            TokenSequence(prompt.vocabulary(), std::move(continuation)),
                            spec,
                            seed,
                            reason};
}

}  // namespace decodekit
