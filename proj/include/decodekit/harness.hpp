#pragma once

// Benchmark orchestration: prompt ingestion, generation runs over many
// systems, corpus metrics, the contrastive-search k-sweep, and the blind
// pairwise worksheet used for human preference studies.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "decodekit/decoding.hpp"
#include "decodekit/lm_interface.hpp"
#include "decodekit/metrics.hpp"

namespace decodekit {

inline constexpr const char* kToolName = "decodekit";
inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Files

struct JsonLine {
    std::size_t line = 0;  // 1-based
    nlohmann::json value;
};

/// Parses JSON Lines, skipping blank lines. InputError names `source` and the
/// line number of the first malformed line.
std::vector<JsonLine> parse_jsonl(std::istream& in, const std::string& source);
std::vector<JsonLine> read_jsonl(const std::filesystem::path& path);
void write_jsonl(std::ostream& out, const std::vector<nlohmann::json>& rows);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// Whitespace tokenizer over a fixed word list (word i has id i).
class Lexicon {
public:
    explicit Lexicon(std::vector<std::string> words);
    std::optional<TokenId> lookup(const std::string& word) const;
    /// nullopt when some word is unknown; `unknown` receives it.
    std::optional<std::vector<TokenId>> tokenize(const std::string& text, std::string* unknown = nullptr) const;
    std::string detokenize(std::span<const TokenId> tokens) const;
    std::size_t size() const noexcept { return words_.size(); }

private:
    std::vector<std::string> words_;
    std::map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Prompts

struct Prompt {
    std::string id;
    std::vector<TokenId> tokens;
};

struct PromptReject {
    std::size_t line = 0;
    std::string id;
    std::string reason;
};

struct PromptSet {
    std::vector<Prompt> prompts;
    std::vector<PromptReject> rejected;
    std::vector<std::string> warnings;
};

/// Lines are {"id": ..., "tokens": [...]} or, with a lexicon, {"id": ..., "text": "..."}.
/// Ids may be strings or integers and are kept as strings; a missing id
/// becomes the 0-based line index. Prompts longer than `prompt_length` are
/// truncated to their first `prompt_length` tokens, shorter ones rejected.
/// `prompt_length` 0 keeps every sequence as is (used for references).
/// load_prompts prefixes each warning with the file path.
PromptSet parse_prompts(const std::vector<JsonLine>& lines, std::size_t prompt_length, const Vocabulary& vocab,
                        const Lexicon* lexicon = nullptr);
PromptSet load_prompts(const std::filesystem::path& path, std::size_t prompt_length, const Vocabulary& vocab,
                       const Lexicon* lexicon = nullptr);

// ---------------------------------------------------------------------------
// Models

/// Builds a model from {"type":"table"|"ngram"|"remote", ...}. Remote specs
/// take "endpoint" (falling back to DECODEKIT_ENDPOINT) and "timeout_ms".
std::unique_ptr<LanguageModel> load_model(const nlohmann::json& spec);
/// Lexicon from the spec's optional "words" list.
std::optional<Lexicon> lexicon_from_model_spec(const nlohmann::json& spec);

// ---------------------------------------------------------------------------
// Configuration

struct BenchmarkSpec {
    std::string name = "benchmark";
    std::filesystem::path prompt_file;
    std::size_t prompt_length = 32;
    std::size_t max_length = 256;
    std::optional<std::filesystem::path> reference_file;
};

struct SystemSpec {
    std::string name;
    DecodeSpec spec;
};

struct MetricSettings {
    /// 0 selects max(1, samples / 10).
    std::size_t num_bins = 0;
    double scaling_constant = 5.0;
    std::size_t grid_points = 25;
    std::string features = kBigramFeatures;
    std::size_t feature_dim = 1024;
    std::size_t truncate = kFrontierTruncation;
    std::uint64_t seed = 0;
};

struct RunConfig {
    BenchmarkSpec benchmark;
    std::vector<SystemSpec> systems;
    nlohmann::json model;
    nlohmann::json amateur;  // null unless some system needs one
    nlohmann::json scorer;   // null: score with `model`
    std::uint64_t seed = 0;
    MetricSettings metrics;
    std::size_t jobs = 0;    // 0: hardware concurrency

    /// Relative paths are resolved against `base_dir`.
    static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
    static RunConfig load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
    void validate() const;
};

/// Stable per-generation seed; independent of which other systems run.
std::uint64_t derive_seed(std::uint64_t master_seed, const std::string& system, std::uint64_t index);

// ---------------------------------------------------------------------------
// Benchmark

struct SystemMetrics {
    std::string name;
    DecodeSpec spec;
    std::optional<double> diversity;   // mean over instances with >= 4 tokens
    std::array<std::optional<double>, 3> rep{};
    std::optional<double> coherence;   // mean over non-degenerate instances
    std::optional<FrontierScore> frontier;
    std::size_t generated = 0;
    std::size_t failures = 0;
    std::size_t too_short = 0;
    std::size_t degenerate = 0;
};

struct GenerationFailure {
    std::string system;
    std::string prompt_id;
    std::string error;
    std::vector<TokenId> partial;
};

struct BenchmarkResult {
    std::vector<std::pair<std::string, GenerationRecord>> records;  // (system, record), sorted
    std::vector<GenerationFailure> failures;
    std::vector<SystemMetrics> systems;
    std::vector<std::string> warnings;  // prompt and reference loading
    nlohmann::json report;
    std::string table;
};

/// Generates every system x prompt pair, scores them, and assembles the report.
BenchmarkResult run_benchmark(const RunConfig& config);

/// Table with one row per system: Method, div.(%), MAUVE(%), coh.
std::string render_table(const std::string& title, const std::vector<SystemMetrics>& systems);

// ---------------------------------------------------------------------------
// k-sweep

struct SweepSpec {
    std::size_t k_min = 2;
    std::size_t k_max = 10;
    double alpha = 0.6;
};

struct SweepRow {
    std::string label;
    std::string strategy;
    std::optional<std::size_t> k;
    std::optional<double> alpha;
    std::optional<double> coherence;
    std::optional<double> diversity;
    std::optional<double> frontier;

    friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepResult {
    std::vector<SweepRow> rows;  // sweep rows in k order, then baselines
    BenchmarkResult benchmark;
};

/// Runs contrastive search for every k in [k_min, k_max] plus the config's
/// own systems as baselines.
SweepResult run_sweep(const SweepSpec& spec, const RunConfig& config);

std::string sweep_to_csv(const std::vector<SweepRow>& rows);
std::vector<SweepRow> sweep_from_csv(const std::string& csv);

// ---------------------------------------------------------------------------
// Standalone corpus metrics

/// A continuation with the prompt it answers, as read from generation records.
struct LabeledRecord {
    std::string prompt_id;
    std::vector<TokenId> prompt;
    std::vector<TokenId> continuation;
};

/// Scores already generated continuations: diversity always, coherence when a
/// scorer is given, and the frontier score when references are given.
/// Continuations are truncated to `settings.truncate` for the frontier only.
struct CorpusEvaluation {
    SystemMetrics aggregates;
    nlohmann::json report;
};

CorpusEvaluation evaluate_corpus(const std::vector<LabeledRecord>& generated, const std::vector<Prompt>* references,
                                 const LanguageModel* scorer, std::size_t vocab_size, const MetricSettings& settings);

// ---------------------------------------------------------------------------
// Pairwise human evaluation

/// Reads generation-record JSON Lines ({"prompt_id","prompt","continuation",...}).
std::vector<LabeledRecord> load_labeled_records(const std::filesystem::path& path);
std::vector<LabeledRecord> labeled_records_from_jsonl(const std::vector<JsonLine>& lines);

struct Worksheet {
    std::vector<nlohmann::json> rows;  // blind: no system names
    std::vector<nlohmann::json> key;   // row -> systems in displayed order
};

/// One worksheet row per prompt with the two continuations in seeded random
/// order. When `prompt_ids` is given only those prompts are exported;
/// otherwise both record sets must cover the same prompts.
Worksheet pairwise_export(const std::vector<LabeledRecord>& records_a, const std::vector<LabeledRecord>& records_b,
                          const std::string& system_a, const std::string& system_b, std::uint64_t order_seed,
                          const std::optional<std::vector<std::string>>& prompt_ids = std::nullopt,
                          const Lexicon* lexicon = nullptr);

struct IngestResult {
    std::vector<PairwiseComparison> comparisons;
    SignTestResult test;
    std::size_t unjudged = 0;

    nlohmann::json to_json() const;
};

/// Verdict rows are {"row": n, "verdict": "first"|"second"|"neutral"}.
IngestResult pairwise_ingest(const std::vector<JsonLine>& verdicts, const std::vector<JsonLine>& key);

}  // namespace decodekit
