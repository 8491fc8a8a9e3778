#include "decodekit/lm_interface.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <nlohmann/json.hpp>

namespace decodekit {

namespace {

constexpr double kTableRowTolerance = 1e-9;

double row_sum(const std::vector<double>& row) {
    return std::accumulate(row.begin(), row.end(), 0.0);
}

double safe_log(double p) {
    return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
}

}  // namespace

Vocabulary Vocabulary::make(std::size_t size, std::optional<TokenId> eod) {
    if (size < 2) {
        throw InputError("vocabulary size must be at least 2, got " + std::to_string(size));
    }
    Vocabulary v{size, eod};
    if (eod && !v.contains(*eod)) {
        throw InputError("end-of-document id " + std::to_string(*eod) + " outside vocabulary of size " +
                         std::to_string(size));
    }
    return v;
}

void validate_tokens(std::span<const TokenId> tokens, const Vocabulary& vocab) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!vocab.contains(tokens[i])) {
            throw InputError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                             " outside vocabulary of size " + std::to_string(vocab.size));
        }
    }
}

TokenSequence::TokenSequence(Vocabulary vocab, std::vector<TokenId> tokens)
    : vocab_(vocab), tokens_(std::move(tokens)) {
    validate_tokens(tokens_, vocab_);
}

void TokenSequence::push_back(TokenId t) {
    if (!vocab_.contains(t)) {
        throw InputError("token id " + std::to_string(t) + " outside vocabulary");
    }
    tokens_.push_back(t);
}

void RepresentationMatrix::append(std::span<const double> v) {
    if (v.size() != dim_) {
        throw InputError("representation of dimension " + std::to_string(v.size()) + " where " +
                         std::to_string(dim_) + " expected");
    }
    data_.insert(data_.end(), v.begin(), v.end());
}

// ---------------------------------------------------------------------------
// LanguageModel

StepOutput LanguageModel::step(std::span<const TokenId> context) const {
    if (context.empty()) {
        throw InputError("step requires a non-empty context");
    }
    validate_tokens(context, vocabulary());
    return do_step(context);
}

ScoredSequence LanguageModel::score(std::span<const TokenId> prefix, std::span<const TokenId> continuation) const {
    if (prefix.empty()) {
        throw InputError("score requires a non-empty prefix");
    }
    if (continuation.empty()) {
        throw InputError("score requires a non-empty continuation");
    }
    validate_tokens(prefix, vocabulary());
    validate_tokens(continuation, vocabulary());
    ScoredSequence out;
    out.logprobs = do_score(prefix, continuation);
    if (out.logprobs.size() != continuation.size()) {
        throw ProtocolError("score returned " + std::to_string(out.logprobs.size()) + " entries for " +
                            std::to_string(continuation.size()) + " tokens");
    }
    out.has_zero_probability = std::any_of(out.logprobs.begin(), out.logprobs.end(),
                                           [](double lp) { return std::isinf(lp) && lp < 0; });
    return out;
}

std::vector<double> LanguageModel::candidate_representation(std::span<const TokenId> context,
                                                            TokenId candidate) const {
    if (context.empty()) {
        throw InputError("candidate_representation requires a non-empty context");
    }
    validate_tokens(context, vocabulary());
    if (!vocabulary().contains(candidate)) {
        throw InputError("candidate id " + std::to_string(candidate) + " outside vocabulary");
    }
    return do_candidate_representation(context, candidate);
}

std::vector<double> LanguageModel::do_score(std::span<const TokenId> prefix,
                                            std::span<const TokenId> continuation) const {
    std::vector<TokenId> ctx(prefix.begin(), prefix.end());
    ctx.reserve(prefix.size() + continuation.size());
    std::vector<double> out;
    out.reserve(continuation.size());
    for (TokenId t : continuation) {
        const StepOutput s = do_step(ctx);
        out.push_back(safe_log(s.distribution[static_cast<std::size_t>(t)]));
        ctx.push_back(t);
    }
    return out;
}

std::vector<double> LanguageModel::do_candidate_representation(std::span<const TokenId> context,
                                                               TokenId candidate) const {
    std::vector<TokenId> ctx(context.begin(), context.end());
    ctx.push_back(candidate);
    const StepOutput s = do_step(ctx);
    const auto last = s.representations.back();
    return {last.begin(), last.end()};
}

StepOutput step(const LanguageModel& model, const TokenSequence& context) {
    if (context.vocabulary() != model.vocabulary()) {
        throw InputError("context vocabulary does not match the model vocabulary");
    }
    return model.step(context.view());
}

ScoredSequence score_sequence(const LanguageModel& model, const TokenSequence& prefix,
                              const TokenSequence& continuation) {
    return model.score(prefix.view(), continuation.view());
}

std::vector<double> candidate_representation(const LanguageModel& model, const TokenSequence& context,
                                             TokenId candidate) {
    return model.candidate_representation(context.view(), candidate);
}

// ---------------------------------------------------------------------------
// TableModel

TableModel::TableModel(Vocabulary vocab, std::size_t order, RowMap rows, RepresentationTable representations)
    : vocab_(Vocabulary::make(vocab.size, vocab.eod)),
      order_(order),
      rows_(std::move(rows)),
      reprs_(std::move(representations)) {
    if (!rows_.contains({})) {
        throw InputError("table model needs an unconditional row (empty context)");
    }
    for (const auto& [ctx, row] : rows_) {
        if (ctx.size() > order_) {
            throw InputError("table row context longer than the model order");
        }
        validate_tokens(ctx, vocab_);
        if (row.size() != vocab_.size) {
            throw InputError("table row has " + std::to_string(row.size()) + " entries, vocabulary has " +
                             std::to_string(vocab_.size));
        }
        if (std::any_of(row.begin(), row.end(), [](double p) { return !(p >= 0.0) || !std::isfinite(p); })) {
            throw InputError("table row contains a negative or non-finite probability");
        }
        if (std::abs(row_sum(row) - 1.0) > kTableRowTolerance) {
            throw InputError("table row does not sum to 1");
        }
    }
    if (reprs_.empty()) {
        throw InputError("table model needs at least one representation window");
    }
    for (const auto& window : reprs_) {
        if (window.size() != vocab_.size) {
            throw InputError("representation window must hold one vector per token");
        }
        for (const auto& v : window) {
            if (dim_ == 0) dim_ = v.size();
            if (v.empty() || v.size() != dim_) {
                throw InputError("representation vectors must share one positive dimension");
            }
        }
    }
}

TableModel TableModel::unconditional(Vocabulary vocab, std::vector<double> row) {
    RowMap rows;
    rows.emplace(std::vector<TokenId>{}, std::move(row));
    RepresentationTable reprs(1, std::vector<std::vector<double>>(vocab.size, std::vector<double>(vocab.size, 0.0)));
    for (std::size_t t = 0; t < vocab.size; ++t) reprs[0][t][t] = 1.0;
    return TableModel(vocab, 0, std::move(rows), std::move(reprs));
}

std::span<const double> TableModel::representation_at(std::size_t position, TokenId token) const {
    return reprs_[position % reprs_.size()][static_cast<std::size_t>(token)];
}

const std::vector<double>& TableModel::lookup(std::span<const TokenId> context) const {
    const std::size_t longest = std::min(order_, context.size());
    for (std::size_t len = longest + 1; len-- > 0;) {
        std::vector<TokenId> key(context.end() - static_cast<std::ptrdiff_t>(len), context.end());
        if (auto it = rows_.find(key); it != rows_.end()) return it->second;
    }
    return rows_.at({});
}

StepOutput TableModel::do_step(std::span<const TokenId> context) const {
    StepOutput out;
    out.distribution = lookup(context);
    out.representations = RepresentationMatrix(dim_);
    out.representations.reserve(context.size());
    for (std::size_t i = 0; i < context.size(); ++i) {
        out.representations.append(representation_at(i, context[i]));
    }
    return out;
}

std::vector<double> TableModel::do_score(std::span<const TokenId> prefix,
                                         std::span<const TokenId> continuation) const {
    std::vector<TokenId> ctx(prefix.begin(), prefix.end());
    std::vector<double> out;
    out.reserve(continuation.size());
    for (TokenId t : continuation) {
        out.push_back(safe_log(lookup(ctx)[static_cast<std::size_t>(t)]));
        ctx.push_back(t);
    }
    return out;
}

std::vector<double> TableModel::do_candidate_representation(std::span<const TokenId> context,
                                                            TokenId candidate) const {
    const auto r = representation_at(context.size(), candidate);
    return {r.begin(), r.end()};
}

// ---------------------------------------------------------------------------
// NgramModel

NgramModel::NgramModel(Vocabulary vocab, std::size_t order, double smoothing,
                       const std::vector<std::vector<TokenId>>& corpus)
    : vocab_(Vocabulary::make(vocab.size, vocab.eod)), order_(order), smoothing_(smoothing) {
    if (order_ < 1) throw InputError("n-gram order must be at least 1");
    if (!(smoothing_ > 0.0) || !std::isfinite(smoothing_)) {
        throw InputError("n-gram smoothing constant must be positive");
    }
    const std::size_t V = vocab_.size;
    auto bump = [&](std::vector<TokenId> ctx, TokenId next) {
        auto [it, inserted] = counts_.try_emplace(std::move(ctx));
        if (inserted) it->second.next.assign(V, 0.0);
        it->second.next[static_cast<std::size_t>(next)] += 1.0;
        it->second.total += 1.0;
    };

    std::vector<double> bigram(V * V, 0.0);
    std::vector<double> bigram_total(V, 0.0);
    for (const auto& seq : corpus) {
        validate_tokens(seq, vocab_);
        for (std::size_t i = 0; i < seq.size(); ++i) {
            const std::size_t max_ctx = std::min(order_ - 1, i);
            for (std::size_t len = 0; len <= max_ctx; ++len) {
                bump(std::vector<TokenId>(seq.begin() + static_cast<std::ptrdiff_t>(i - len),
                                          seq.begin() + static_cast<std::ptrdiff_t>(i)),
                     seq[i]);
            }
            if (i > 0) {
                const auto prev = static_cast<std::size_t>(seq[i - 1]);
                bigram[prev * V + static_cast<std::size_t>(seq[i])] += 1.0;
                bigram_total[prev] += 1.0;
            }
        }
    }

    embeddings_.resize(V * V);
    for (std::size_t a = 0; a < V; ++a) {
        const double denom = bigram_total[a] + smoothing_ * static_cast<double>(V);
        for (std::size_t b = 0; b < V; ++b) {
            embeddings_[a * V + b] = (bigram[a * V + b] + smoothing_) / denom;
        }
    }
}

const NgramModel::Counts* NgramModel::find_context(std::span<const TokenId> context) const {
    const std::size_t longest = std::min(order_ - 1, context.size());
    for (std::size_t len = longest + 1; len-- > 0;) {
        std::vector<TokenId> key(context.end() - static_cast<std::ptrdiff_t>(len), context.end());
        if (auto it = counts_.find(key); it != counts_.end()) return &it->second;
    }
    return nullptr;
}

void NgramModel::fill_distribution(std::span<const TokenId> context, std::vector<double>& out) const {
    const std::size_t V = vocab_.size;
    out.assign(V, 0.0);
    const Counts* c = find_context(context);
    const double total = c ? c->total : 0.0;
    const double denom = total + smoothing_ * static_cast<double>(V);
    for (std::size_t w = 0; w < V; ++w) {
        out[w] = ((c ? c->next[w] : 0.0) + smoothing_) / denom;
    }
}

double NgramModel::probability(std::span<const TokenId> context, TokenId token) const {
    validate_tokens(context, vocab_);
    if (!vocab_.contains(token)) throw InputError("token id outside vocabulary");
    const Counts* c = find_context(context);
    const double total = c ? c->total : 0.0;
    return ((c ? c->next[static_cast<std::size_t>(token)] : 0.0) + smoothing_) /
           (total + smoothing_ * static_cast<double>(vocab_.size));
}

std::span<const double> NgramModel::embedding(TokenId token) const {
    return {embeddings_.data() + static_cast<std::size_t>(token) * vocab_.size, vocab_.size};
}

StepOutput NgramModel::do_step(std::span<const TokenId> context) const {
    StepOutput out;
    fill_distribution(context, out.distribution);
    out.representations = RepresentationMatrix(vocab_.size);
    out.representations.reserve(context.size());
    for (TokenId t : context) out.representations.append(embedding(t));
    return out;
}

std::vector<double> NgramModel::do_score(std::span<const TokenId> prefix,
                                         std::span<const TokenId> continuation) const {
    std::vector<TokenId> ctx(prefix.begin(), prefix.end());
    std::vector<double> dist;
    std::vector<double> out;
    out.reserve(continuation.size());
    for (TokenId t : continuation) {
        fill_distribution(ctx, dist);
        out.push_back(safe_log(dist[static_cast<std::size_t>(t)]));
        ctx.push_back(t);
    }
    return out;
}

std::vector<double> NgramModel::do_candidate_representation(std::span<const TokenId>, TokenId candidate) const {
    const auto e = embedding(candidate);
    return {e.begin(), e.end()};
}

// ---------------------------------------------------------------------------
// JSON construction

namespace {

Vocabulary vocab_from_json(const nlohmann::json& spec) {
    if (!spec.contains("vocab_size")) throw InputError("model spec missing \"vocab_size\"");
    std::optional<TokenId> eod;
    if (spec.contains("eod") && !spec.at("eod").is_null()) eod = spec.at("eod").get<TokenId>();
    return Vocabulary::make(spec.at("vocab_size").get<std::size_t>(), eod);
}

}  // namespace

std::unique_ptr<LanguageModel> toy_model_from_json(const nlohmann::json& spec) {
    try {
        const std::string type = spec.at("type").get<std::string>();
        const Vocabulary vocab = vocab_from_json(spec);
        if (type == "table") {
            TableModel::RowMap rows;
            for (const auto& r : spec.at("rows")) {
                rows[r.at("context").get<std::vector<TokenId>>()] = r.at("probs").get<std::vector<double>>();
            }
            const auto order = spec.value("order", std::size_t{0});
            if (!spec.contains("representations")) {
                TableModel::RepresentationTable one_hot(
                    1, std::vector<std::vector<double>>(vocab.size, std::vector<double>(vocab.size, 0.0)));
                for (std::size_t t = 0; t < vocab.size; ++t) one_hot[0][t][t] = 1.0;
                return std::make_unique<TableModel>(vocab, order, std::move(rows), std::move(one_hot));
            }
            return std::make_unique<TableModel>(
                vocab, order, std::move(rows),
                spec.at("representations").get<TableModel::RepresentationTable>());
        }
        if (type == "ngram") {
            return std::make_unique<NgramModel>(vocab, spec.value("order", std::size_t{2}),
                                                spec.value("smoothing", 0.1),
                                                spec.at("corpus").get<std::vector<std::vector<TokenId>>>());
        }
        throw InputError("unknown toy model type \"" + type + "\"");
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed model spec: ") + e.what());
    }
}

}  // namespace decodekit
