#pragma once

// Language-model contract consumed by every decoder and by the coherence
// metric, plus two deterministic in-process models used for testing and
// desk-scale runs.

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "decodekit/errors.hpp"
#include "decodekit/types.hpp"

namespace decodekit {

struct Vocabulary {
    std::size_t size = 0;
    std::optional<TokenId> eod;

    /// Throws InputError unless size >= 2 and eod (if any) is a valid id.
    static Vocabulary make(std::size_t size, std::optional<TokenId> eod = std::nullopt);

    bool contains(TokenId t) const noexcept { return t >= 0 && static_cast<std::size_t>(t) < size; }
    bool is_eod(TokenId t) const noexcept { return eod && *eod == t; }

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

/// Throws InputError naming the first token that falls outside `vocab`.
void validate_tokens(std::span<const TokenId> tokens, const Vocabulary& vocab);

/// Token ids bound to the vocabulary they were validated against.
class TokenSequence {
public:
    TokenSequence(Vocabulary vocab, std::vector<TokenId> tokens);

    const Vocabulary& vocabulary() const noexcept { return vocab_; }
    const std::vector<TokenId>& tokens() const noexcept { return tokens_; }
    std::span<const TokenId> view() const noexcept { return tokens_; }
    std::size_t size() const noexcept { return tokens_.size(); }
    bool empty() const noexcept { return tokens_.empty(); }

    void push_back(TokenId t);

    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;

private:
    Vocabulary vocab_;
    std::vector<TokenId> tokens_;
};

/// Row-major matrix with one fixed-width vector per context token.
class RepresentationMatrix {
public:
    RepresentationMatrix() = default;
    explicit RepresentationMatrix(std::size_t dim) : dim_(dim) {}

    std::size_t rows() const noexcept { return dim_ == 0 ? 0 : data_.size() / dim_; }
    std::size_t dim() const noexcept { return dim_; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
    std::span<const double> back() const { return row(rows() - 1); }
    void append(std::span<const double> v);
    void reserve(std::size_t rows) { data_.reserve(rows * dim_); }

    friend bool operator==(const RepresentationMatrix&, const RepresentationMatrix&) = default;

private:
    std::size_t dim_ = 0;
    std::vector<double> data_;
};

struct StepOutput {
    std::vector<double> distribution;
    RepresentationMatrix representations;

    friend bool operator==(const StepOutput&, const StepOutput&) = default;
};

/// Per-position log-probabilities of a continuation. A zero-probability token
/// contributes -inf and sets `has_zero_probability`.
struct ScoredSequence {
    std::vector<double> logprobs;
    bool has_zero_probability = false;
};

/// Immutable, deterministic language model. All public entry points validate
/// their inputs and then forward to the protected hooks.
class LanguageModel {
public:
    virtual ~LanguageModel() = default;

    virtual const Vocabulary& vocabulary() const noexcept = 0;
    virtual std::size_t representation_dim() const noexcept = 0;

    /// Next-token distribution for `context` plus one representation per
    /// context token. Empty contexts and out-of-vocabulary ids are InputErrors.
    StepOutput step(std::span<const TokenId> context) const;

    /// log p(continuation[i] | prefix ++ continuation[..i]) for every i.
    ScoredSequence score(std::span<const TokenId> prefix, std::span<const TokenId> continuation) const;

    /// Representation of `candidate` when appended to `context`; always equal
    /// to step(context ++ candidate).representations.back().
    std::vector<double> candidate_representation(std::span<const TokenId> context, TokenId candidate) const;

protected:
    virtual StepOutput do_step(std::span<const TokenId> context) const = 0;
    virtual std::vector<double> do_score(std::span<const TokenId> prefix,
                                         std::span<const TokenId> continuation) const;
    virtual std::vector<double> do_candidate_representation(std::span<const TokenId> context,
                                                            TokenId candidate) const;
};

// Free-function spellings of the contract operations.
StepOutput step(const LanguageModel& model, const TokenSequence& context);
ScoredSequence score_sequence(const LanguageModel& model, const TokenSequence& prefix,
                              const TokenSequence& continuation);
std::vector<double> candidate_representation(const LanguageModel& model, const TokenSequence& context,
                                             TokenId candidate);

/// Explicit conditional-probability table.
///
/// Rows are keyed by a context suffix of at most `order` tokens; a lookup uses
/// the longest suffix of the context that has a row, so the empty-suffix row
/// is mandatory. Representations are indexed by (position % windows, token).
class TableModel final : public LanguageModel {
public:
    using RowMap = std::map<std::vector<TokenId>, std::vector<double>>;
    /// [window][token] -> vector
    using RepresentationTable = std::vector<std::vector<std::vector<double>>>;

    TableModel(Vocabulary vocab, std::size_t order, RowMap rows, RepresentationTable representations);

    /// Same row for every context and one-hot representations per token.
    static TableModel unconditional(Vocabulary vocab, std::vector<double> row);

    const Vocabulary& vocabulary() const noexcept override { return vocab_; }
    std::size_t representation_dim() const noexcept override { return dim_; }
    std::size_t order() const noexcept { return order_; }
    const RowMap& rows() const noexcept { return rows_; }
    const RepresentationTable& representation_table() const noexcept { return reprs_; }
    std::span<const double> representation_at(std::size_t position, TokenId token) const;

protected:
    StepOutput do_step(std::span<const TokenId> context) const override;
    std::vector<double> do_score(std::span<const TokenId> prefix,
                                 std::span<const TokenId> continuation) const override;
    std::vector<double> do_candidate_representation(std::span<const TokenId> context,
                                                    TokenId candidate) const override;

private:
    const std::vector<double>& lookup(std::span<const TokenId> context) const;

    Vocabulary vocab_;
    std::size_t order_;
    RowMap rows_;
    RepresentationTable reprs_;
    std::size_t dim_ = 0;
};

/// Additively smoothed n-gram model.
///
/// p(w | h) = (c(h, w) + smoothing) / (c(h) + smoothing * V) where h is the
/// longest suffix of the context (at most order - 1 tokens) seen in training.
/// Each token's representation is its row of smoothed bigram continuation
/// probabilities, so the representation dimension equals the vocabulary size.
class NgramModel final : public LanguageModel {
public:
    NgramModel(Vocabulary vocab, std::size_t order, double smoothing,
               const std::vector<std::vector<TokenId>>& corpus);

    const Vocabulary& vocabulary() const noexcept override { return vocab_; }
    std::size_t representation_dim() const noexcept override { return vocab_.size; }
    std::size_t order() const noexcept { return order_; }
    double smoothing() const noexcept { return smoothing_; }

    double probability(std::span<const TokenId> context, TokenId token) const;
    std::span<const double> embedding(TokenId token) const;

protected:
    StepOutput do_step(std::span<const TokenId> context) const override;
    std::vector<double> do_score(std::span<const TokenId> prefix,
                                 std::span<const TokenId> continuation) const override;
    std::vector<double> do_candidate_representation(std::span<const TokenId> context,
                                                    TokenId candidate) const override;

private:
    struct Counts {
        std::vector<double> next;
        double total = 0.0;
    };
    const Counts* find_context(std::span<const TokenId> context) const;
    void fill_distribution(std::span<const TokenId> context, std::vector<double>& out) const;

    Vocabulary vocab_;
    std::size_t order_;
    double smoothing_;
    std::map<std::vector<TokenId>, Counts> counts_;
    std::vector<double> embeddings_;  // V x V, row-major
};

/// Builds a table or n-gram model from its JSON description:
///   {"type":"table","vocab_size":V,"eod":E,"order":n,
///    "rows":[{"context":[...],"probs":[...]}, ...],
///    "representations":[[[...] per token] per window]}
///   {"type":"ngram","vocab_size":V,"eod":E,"order":n,"smoothing":s,
///    "corpus":[[...], ...]}
/// "representations" may be omitted for tables (one-hot vectors are used).
std::unique_ptr<LanguageModel> toy_model_from_json(const nlohmann::json& spec);

}  // namespace decodekit
