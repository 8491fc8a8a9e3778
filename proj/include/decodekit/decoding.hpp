#pragma once

// Decoding strategies and the shared generation loop.
//
// Every ranking in this module breaks ties by the lowest token id, and every
// "smallest prefix reaching mass m" rule keeps the prefix in that same order,
// so two tokens of equal probability straddling a cut are resolved toward the
// lower id.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "decodekit/lm_interface.hpp"

namespace decodekit {

// ---------------------------------------------------------------------------
// Strategy configuration

struct Greedy {
    friend bool operator==(const Greedy&, const Greedy&) = default;
};
struct TopK {
    std::size_t k = 50;
    friend bool operator==(const TopK&, const TopK&) = default;
};
struct Nucleus {
    double p = 0.95;
    friend bool operator==(const Nucleus&, const Nucleus&) = default;
};
struct Typical {
    double tau = 0.95;
    friend bool operator==(const Typical&, const Typical&) = default;
};
/// alpha bounds the plausibility set; amateur_temperature scales amateur logits.
struct ContrastiveDecoding {
    double alpha = 0.1;
    double amateur_temperature = 0.5;
    friend bool operator==(const ContrastiveDecoding&, const ContrastiveDecoding&) = default;
};
/// alpha weighs the degeneration penalty against model confidence.
struct ContrastiveSearch {
    std::size_t k = 5;
    double alpha = 0.6;
    friend bool operator==(const ContrastiveSearch&, const ContrastiveSearch&) = default;
};

using DecodeSpec = std::variant<Greedy, TopK, Nucleus, Typical, ContrastiveDecoding, ContrastiveSearch>;

/// Throws InputError when a hyperparameter is out of range.
void validate(const DecodeSpec& spec);
/// "greedy", "top-k", "nucleus", "typical", "contrastive-decoding", "contrastive-search".
std::string strategy_name(const DecodeSpec& spec);
bool needs_amateur(const DecodeSpec& spec);
bool is_stochastic(const DecodeSpec& spec);

nlohmann::json to_json(const DecodeSpec& spec);
/// Missing hyperparameters take the defaults above.
DecodeSpec decode_spec_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Random stream

/// Per-generation random stream. Uniform draws are built from the raw 64-bit
/// engine output so results do not depend on the standard library's
/// distribution implementations.
class SampleStream {
public:
    explicit SampleStream(std::uint64_t seed) : engine_(seed) {}
    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

private:
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Single-distribution step rules

TokenId greedy_step(std::span<const double> dist);

/// Token ids in descending probability order, ties by lowest id.
std::vector<TokenId> rank_by_probability(std::span<const double> dist);

/// The k most probable tokens (k clamped to the vocabulary size).
std::vector<TokenId> topk_support(std::span<const double> dist, std::size_t k);
/// Smallest probability-ranked prefix with cumulative mass >= p.
std::vector<TokenId> nucleus_support(std::span<const double> dist, double p);
/// Smallest prefix, ranked by |-log p(v) - H| ascending, with mass >= tau.
/// Zero-probability tokens are never included.
std::vector<TokenId> typical_support(std::span<const double> dist, double tau);

/// Draws from `dist` restricted to `support` and renormalized.
TokenId sample_from_support(std::span<const double> dist, std::span<const TokenId> support, SampleStream& rng);

TokenId topk_sample_step(std::span<const double> dist, std::size_t k, SampleStream& rng);
TokenId nucleus_sample_step(std::span<const double> dist, double p, SampleStream& rng);
TokenId typical_sample_step(std::span<const double> dist, double tau, SampleStream& rng);

// ---------------------------------------------------------------------------
// Contrastive strategies

/// Diagnostic record of one decoding step. Per-candidate vectors are parallel
/// to `candidates`; vectors that do not apply to the strategy stay empty.
struct StepTrace {
    std::size_t step = 0;
    std::string strategy;
    std::vector<TokenId> candidates;
    std::vector<double> confidence;         // model probability of each candidate
    std::vector<double> penalty;            // CS degeneration penalty
    std::vector<double> expert_logprob;     // CD
    std::vector<double> amateur_logprob;    // CD, temperature-scaled
    std::vector<double> score;              // CS / CD objective
    TokenId chosen = -1;
    bool zero_norm_representation = false;  // CS: some cosine treated as 0
    bool infinite_score = false;            // CD: amateur gave a candidate zero probability

    nlohmann::json to_json() const;
};

/// { v : p(v) >= alpha * max_w p(w) }, ascending ids.
std::vector<TokenId> cd_candidate_set(std::span<const double> expert_dist, double alpha);

/// log-probabilities after dividing log p by `temperature` and renormalizing.
/// Zero-probability entries stay -inf. Temperature 1 returns log p unchanged.
std::vector<double> temperature_scaled_logprobs(std::span<const double> dist, double temperature);

/// Contrastive decoding from already computed expert and amateur distributions.
TokenId cd_select(std::span<const double> expert_dist, std::span<const double> amateur_dist, double alpha,
                  double amateur_temperature, StepTrace* trace = nullptr);

TokenId cd_step(const LanguageModel& expert, const LanguageModel& amateur, std::span<const TokenId> context,
                double alpha, double amateur_temperature, StepTrace* trace = nullptr);

/// Cosine similarity; 0 when either vector has zero norm (and sets *zero_norm).
double cosine_similarity(std::span<const double> a, std::span<const double> b, bool* zero_norm = nullptr);

/// Contrastive search given the step output already computed for `context`.
/// Candidates are the k most probable tokens with nonzero probability.
TokenId cs_select(const LanguageModel& model, std::span<const TokenId> context, const StepOutput& out,
                  std::size_t k, double alpha, StepTrace* trace = nullptr);

TokenId cs_step(const LanguageModel& model, std::span<const TokenId> context, std::size_t k, double alpha,
                StepTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Generation loop

enum class StopReason { EndOfDocument, MaxLength };

std::string to_string(StopReason r);
StopReason stop_reason_from_string(const std::string& s);

struct GenerationRecord {
    std::string prompt_id;
    TokenSequence prompt;
    TokenSequence continuation;
    DecodeSpec spec;
    std::uint64_t seed = 0;
    StopReason stop_reason = StopReason::MaxLength;

    nlohmann::json to_json() const;
    static GenerationRecord from_json(const nlohmann::json& j, const Vocabulary& vocab);
};

/// Expert (or the only) model plus the amateur used by contrastive decoding.
struct DecoderModels {
    const LanguageModel* model = nullptr;
    const LanguageModel* amateur = nullptr;
};

using TraceSink = std::function<void(const StepTrace&)>;

/// Runs `spec` from `prompt` until the end-of-document token is emitted or
/// `max_length` tokens have been produced. Step failures are rethrown as
/// GenerationError carrying the partial continuation.
GenerationRecord generate(const DecoderModels& models, const TokenSequence& prompt, const DecodeSpec& spec,
                          std::size_t max_length, std::uint64_t seed, const TraceSink& trace = {});

}  // namespace decodekit
