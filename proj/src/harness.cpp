#include "decodekit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "decodekit/remote.hpp"

namespace decodekit {

namespace fs = std::filesystem;

namespace {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
    jobs = std::min(jobs, n);
    if (jobs <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> workers;
    workers.reserve(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
}

std::string id_to_string(const nlohmann::json& id) {
    return id.is_string() ? id.get<std::string>() : id.dump();
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> mean_of(const std::vector<double>& xs) {
    if (xs.empty()) return std::nullopt;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

fs::path resolve(const fs::path& base, const fs::path& p) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::vector<double> extract_features(const MetricSettings& m, const LanguageModel* scorer, std::size_t vocab_size,
                                     std::span<const TokenId> tokens) {
    const auto truncated = truncate_for_frontier(tokens, m.truncate);
    if (m.features == kMeanRepresentationFeatures) {
        if (scorer == nullptr) throw InputError("the scorer-mean-repr feature extractor needs a scorer model");
        return mean_representation_features(*scorer, truncated);
    }
    return bigram_features(truncated, vocab_size, m.feature_dim);
}

FrontierOptions frontier_options(const MetricSettings& m, std::size_t samples) {
    FrontierOptions fo;
    fo.num_bins = m.num_bins > 0 ? m.num_bins : std::max<std::size_t>(1, samples / 10);
    fo.scaling_constant = m.scaling_constant;
    fo.grid_points = m.grid_points;
    fo.seed = m.seed;
    return fo;
}

nlohmann::json settings_json(const MetricSettings& m) {
    return {{"num_bins", m.num_bins},       {"scaling_constant", m.scaling_constant},
            {"grid_points", m.grid_points}, {"features", m.features},
            {"feature_dim", m.feature_dim}, {"truncate", m.truncate},
            {"seed", m.seed}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Files

std::vector<JsonLine> parse_jsonl(std::istream& in, const std::string& source) {
    std::vector<JsonLine> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json v = nlohmann::json::parse(line, nullptr, false);
        if (v.is_discarded()) throw InputError(source + ":" + std::to_string(n) + ": malformed JSON line");
        out.push_back({n, std::move(v)});
    }
    return out;
}

std::vector<JsonLine> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    return parse_jsonl(in, path.string());
}

void write_jsonl(std::ostream& out, const std::vector<nlohmann::json>& rows) {
    for (const auto& r : rows) out << r.dump() << '\n';
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out << text;
}

Lexicon::Lexicon(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second) {
            throw InputError("duplicate word \"" + words_[i] + "\" in lexicon");
        }
    }
}

std::optional<TokenId> Lexicon::lookup(const std::string& word) const {
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    return std::nullopt;
}

std::optional<std::vector<TokenId>> Lexicon::tokenize(const std::string& text, std::string* unknown) const {
    std::istringstream ss(text);
    std::vector<TokenId> out;
    std::string w;
    while (ss >> w) {
        const auto id = lookup(w);
        if (!id) {
            if (unknown) *unknown = w;
            return std::nullopt;
        }
        out.push_back(*id);
    }
    return out;
}

std::string Lexicon::detokenize(std::span<const TokenId> tokens) const {
    std::string out;
    for (TokenId t : tokens) {
        if (!out.empty()) out += ' ';
        out += (t >= 0 && static_cast<std::size_t>(t) < words_.size()) ? words_[static_cast<std::size_t>(t)]
                                                                          : "<" + std::to_string(t) + ">";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompts

PromptSet parse_prompts(const std::vector<JsonLine>& lines, std::size_t prompt_length, const Vocabulary& vocab,
                        const Lexicon* lexicon) {
    PromptSet set;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto& [line, v] = lines[i];
        const std::string where = "line " + std::to_string(line);
        if (!v.is_object()) throw InputError(where + ": prompt line must be a JSON object");
        Prompt p;
        p.id = v.contains("id") ? id_to_string(v.at("id")) : std::to_string(i);
        if (v.contains("tokens")) {
            if (!v.at("tokens").is_array()) throw InputError(where + ": \"tokens\" must be an array");
            for (const auto& t : v.at("tokens")) {
                if (!t.is_number_integer()) throw InputError(where + ": token ids must be integers");
                p.tokens.push_back(t.get<TokenId>());
            }
        } else if (v.contains("text") && lexicon != nullptr) {
            std::string unknown;
            auto toks = lexicon->tokenize(v.at("text").get<std::string>(), &unknown);
            if (!toks) {
                set.rejected.push_back({line, p.id, "unknown word \"" + unknown + "\""});
                continue;
            }
            p.tokens = std::move(*toks);
        } else {
            throw InputError(where + ": prompt line needs \"tokens\"" +
                             std::string(lexicon ? " or \"text\"" : ""));
        }
        try {
            validate_tokens(p.tokens, vocab);
        } catch (const InputError& e) {
            set.rejected.push_back({line, p.id, e.what()});
            continue;
        }
        if (prompt_length > 0) {
            if (p.tokens.size() < prompt_length) {
                set.rejected.push_back({line, p.id,
                                        "has " + std::to_string(p.tokens.size()) + " tokens, needs " +
                                            std::to_string(prompt_length)});
                continue;
            }
            p.tokens.resize(prompt_length);
        }
        if (!seen.insert(p.id).second) throw InputError(where + ": duplicate prompt id \"" + p.id + "\"");
        set.prompts.push_back(std::move(p));
    }
    if (lines.empty()) set.warnings.push_back("prompt file is empty");
    for (const auto& r : set.rejected) {
        set.warnings.push_back("rejected prompt \"" + r.id + "\" (line " + std::to_string(r.line) + "): " + r.reason);
    }
    return set;
}

PromptSet load_prompts(const fs::path& path, std::size_t prompt_length, const Vocabulary& vocab,
                       const Lexicon* lexicon) {
    const auto lines = read_jsonl(path);
    PromptSet set = parse_prompts(lines, prompt_length, vocab, lexicon);
    for (auto& w : set.warnings) w = path.string() + ": " + w;
    return set;
}

// ---------------------------------------------------------------------------
// Models

std::unique_ptr<LanguageModel> load_model(const nlohmann::json& spec) {
    if (!spec.is_object() || !spec.contains("type")) throw InputError("model spec must be an object with a \"type\"");
    if (spec.at("type") == "remote") {
        const Endpoint ep = spec.contains("endpoint") ? Endpoint::parse(spec.at("endpoint").get<std::string>())
                                                      : endpoint_from_env();
        const auto timeout = std::chrono::milliseconds(spec.value("timeout_ms", 10000));
        return std::make_unique<RemoteModel>(ep, timeout);
    }
    return toy_model_from_json(spec);
}

std::optional<Lexicon> lexicon_from_model_spec(const nlohmann::json& spec) {
    if (!spec.is_object() || !spec.contains("words")) return std::nullopt;
    return Lexicon(spec.at("words").get<std::vector<std::string>>());
}

// ---------------------------------------------------------------------------
// Configuration

RunConfig RunConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
    RunConfig c;
    try {
        const auto& b = j.at("benchmark");
        c.benchmark.name = b.value("name", c.benchmark.name);
        c.benchmark.prompt_file = resolve(base_dir, b.at("prompt_file").get<std::string>());
        c.benchmark.prompt_length = b.value("prompt_length", c.benchmark.prompt_length);
        c.benchmark.max_length = b.value("max_length", c.benchmark.max_length);
        if (b.contains("reference_file") && !b.at("reference_file").is_null()) {
            c.benchmark.reference_file = resolve(base_dir, b.at("reference_file").get<std::string>());
        }
        for (const auto& s : j.at("systems")) {
            c.systems.push_back({s.at("name").get<std::string>(), decode_spec_from_json(s)});
        }
        c.model = j.at("model");
        c.amateur = j.value("amateur", nlohmann::json());
        c.scorer = j.value("scorer", nlohmann::json());
        c.seed = j.value("seed", std::uint64_t{0});
        c.jobs = j.value("jobs", std::size_t{0});
        if (j.contains("metrics")) {
            const auto& m = j.at("metrics");
            c.metrics.num_bins = m.value("num_bins", c.metrics.num_bins);
            c.metrics.scaling_constant = m.value("scaling_constant", c.metrics.scaling_constant);
            c.metrics.grid_points = m.value("grid_points", c.metrics.grid_points);
            c.metrics.features = m.value("features", c.metrics.features);
            c.metrics.feature_dim = m.value("feature_dim", c.metrics.feature_dim);
            c.metrics.truncate = m.value("truncate", c.metrics.truncate);
            c.metrics.seed = m.value("seed", c.metrics.seed);
        }
        // Model specs that point at files are inlined so configs stay portable.
        for (nlohmann::json* spec : {&c.model, &c.amateur, &c.scorer}) {
            if (spec->is_string()) *spec = nlohmann::json::parse(read_text_file(resolve(base_dir, spec->get<std::string>())));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed run config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    const std::string text = read_text_file(path);
    const nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw InputError(path.string() + ": run config is not valid JSON");
    return from_json(j, path.parent_path());
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json systems_j = nlohmann::json::array();
    for (const auto& s : systems) {
        auto sj = decodekit::to_json(s.spec);
        sj["name"] = s.name;
        systems_j.push_back(std::move(sj));
    }
    nlohmann::json b{{"name", benchmark.name},
                     {"prompt_file", benchmark.prompt_file.string()},
                     {"prompt_length", benchmark.prompt_length},
                     {"max_length", benchmark.max_length},
                     {"reference_file", benchmark.reference_file ? nlohmann::json(benchmark.reference_file->string())
                                                                 : nlohmann::json(nullptr)}};
    return {{"benchmark", std::move(b)},
            {"systems", std::move(systems_j)},
            {"model", model},
            {"amateur", amateur},
            {"scorer", scorer},
            {"seed", seed},
            {"metrics", settings_json(metrics)}};
}

void RunConfig::validate() const {
    if (benchmark.prompt_length < 1) throw InputError("prompt_length must be at least 1");
    if (benchmark.max_length < 1) throw InputError("max_length must be at least 1");
    std::set<std::string> names;
    for (const auto& s : systems) {
        if (s.name.empty()) throw InputError("system names must be non-empty");
        if (!names.insert(s.name).second) throw InputError("duplicate system name \"" + s.name + "\"");
        decodekit::validate(s.spec);
        if (needs_amateur(s.spec) && amateur.is_null()) {
            throw InputError("system \"" + s.name + "\" uses contrastive decoding but no amateur model is configured");
        }
    }
    if (metrics.features != kBigramFeatures && metrics.features != kMeanRepresentationFeatures) {
        throw InputError("unknown feature extractor \"" + metrics.features + "\"");
    }
    if (!(metrics.scaling_constant > 0.0)) throw InputError("scaling_constant must be positive");
    if (metrics.grid_points < 1) throw InputError("grid_points must be at least 1");
    if (metrics.truncate < 1) throw InputError("truncate must be at least 1");
}

std::uint64_t derive_seed(std::uint64_t master_seed, const std::string& system, std::uint64_t index) {
    // FNV-1a over (seed, name, index), then a splitmix64 finalizer.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix_byte = [&](unsigned char b) {
        h ^= b;
        h *= 0x100000001b3ULL;
    };
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>(master_seed >> (8 * i)));
    for (char ch : system) mix_byte(static_cast<unsigned char>(ch));
    mix_byte(0);
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>(index >> (8 * i)));
    return splitmix64(h);
}

// ---------------------------------------------------------------------------
// Benchmark

namespace {

struct Instance {
    std::optional<GenerationRecord> record;
    std::optional<GenerationFailure> failure;
    DiversityReport diversity;
    std::optional<CoherenceScore> coherence;
    std::string metric_error;
};

nlohmann::json system_metrics_json(const SystemMetrics& s) {
    nlohmann::json f = nullptr;
    if (s.frontier) f = s.frontier->to_json();
    return {{"diversity", opt_json(s.diversity)},
            {"diversity_pct", s.diversity ? nlohmann::json(*s.diversity * 100.0) : nlohmann::json(nullptr)},
            {"rep_2", opt_json(s.rep[0])},
            {"rep_3", opt_json(s.rep[1])},
            {"rep_4", opt_json(s.rep[2])},
            {"coherence", opt_json(s.coherence)},
            {"frontier", std::move(f)},
            {"frontier_pct", s.frontier ? nlohmann::json(s.frontier->value * 100.0) : nlohmann::json(nullptr)},
            {"generated", s.generated},
            {"failures", s.failures},
            {"too_short", s.too_short},
            {"degenerate", s.degenerate}};
}

std::string fmt_cell(const std::optional<double>& v, int precision) {
    if (!v) return "-";
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(precision) << *v;
    return ss.str();
}

}  // namespace

std::string render_table(const std::string& title, const std::vector<SystemMetrics>& systems) {
    std::size_t name_w = std::string("Method").size();
    for (const auto& s : systems) name_w = std::max(name_w, s.name.size());
    std::ostringstream out;
    out << title << '\n';
    out << std::left << std::setw(static_cast<int>(name_w)) << "Method" << std::right << std::setw(10) << "div.(%)"
        << std::setw(10) << "MAUVE(%)" << std::setw(10) << "coh." << '\n';
    for (const auto& s : systems) {
        std::optional<double> div_pct;
        if (s.diversity) div_pct = *s.diversity * 100.0;
        std::optional<double> mauve_pct;
        if (s.frontier) mauve_pct = s.frontier->value * 100.0;
        out << std::left << std::setw(static_cast<int>(name_w)) << s.name << std::right << std::setw(10)
            << fmt_cell(div_pct, 2) << std::setw(10) << fmt_cell(mauve_pct, 2) << std::setw(10)
            << fmt_cell(s.coherence, 2) << '\n';
    }
    return out.str();
}

BenchmarkResult run_benchmark(const RunConfig& config) {
    config.validate();
    const auto model = load_model(config.model);
    std::unique_ptr<LanguageModel> amateur;
    if (!config.amateur.is_null()) amateur = load_model(config.amateur);
    std::unique_ptr<LanguageModel> scorer_owned;
    if (!config.scorer.is_null()) scorer_owned = load_model(config.scorer);
    const LanguageModel& scorer = scorer_owned ? *scorer_owned : *model;
    const Vocabulary& vocab = model->vocabulary();
    if (scorer.vocabulary().size != vocab.size) throw InputError("scorer vocabulary does not match the model");

    const auto lexicon = lexicon_from_model_spec(config.model);
    const PromptSet prompts =
        load_prompts(config.benchmark.prompt_file, config.benchmark.prompt_length, vocab, lexicon ? &*lexicon : nullptr);
    std::optional<PromptSet> references;
    if (config.benchmark.reference_file) {
        references = load_prompts(*config.benchmark.reference_file, 0, vocab, lexicon ? &*lexicon : nullptr);
    }

    const std::size_t n_prompts = prompts.prompts.size();
    const std::size_t n_tasks = config.systems.size() * n_prompts;
    std::vector<Instance> instances(n_tasks);
    const DecoderModels models{model.get(), amateur.get()};

    parallel_for(n_tasks, config.jobs, [&](std::size_t task) {
        const auto& system = config.systems[task / n_prompts];
        const std::size_t pi = task % n_prompts;
        const Prompt& prompt = prompts.prompts[pi];
        Instance& inst = instances[task];
        try {
            GenerationRecord rec = generate(models, TokenSequence(vocab, prompt.tokens), system.spec,
                                            config.benchmark.max_length, derive_seed(config.seed, system.name, pi));
            rec.prompt_id = prompt.id;
            inst.diversity = diversity(rec.continuation.view());
            try {
                inst.coherence = coherence(scorer, rec.prompt.view(), rec.continuation.view());
            } catch (const Error& e) {
                inst.metric_error = e.what();
            }
            inst.record = std::move(rec);
        } catch (const GenerationError& e) {
            inst.failure = GenerationFailure{system.name, prompt.id, e.what(), e.partial_continuation()};
        } catch (const Error& e) {
            inst.failure = GenerationFailure{system.name, prompt.id, e.what(), {}};
        }
    });

    BenchmarkResult result;
    result.warnings = prompts.warnings;
    if (references) result.warnings.insert(result.warnings.end(), references->warnings.begin(), references->warnings.end());
    std::vector<std::vector<double>> reference_features;
    if (references && !references->prompts.empty()) {
        reference_features.reserve(references->prompts.size());
        for (const auto& r : references->prompts) {
            reference_features.push_back(extract_features(config.metrics, &scorer, vocab.size, r.tokens));
        }
    }

    nlohmann::json systems_j = nlohmann::json::array();
    nlohmann::json records_j = nlohmann::json::array();
    nlohmann::json failures_j = nlohmann::json::array();
    for (std::size_t s = 0; s < config.systems.size(); ++s) {
        SystemMetrics m;
        m.name = config.systems[s].name;
        m.spec = config.systems[s].spec;
        std::vector<double> divs;
        std::array<std::vector<double>, 3> reps;
        std::vector<double> cohs;
        std::vector<std::vector<double>> gen_features;
        nlohmann::json inst_j = nlohmann::json::array();
        for (std::size_t pi = 0; pi < n_prompts; ++pi) {
            Instance& inst = instances[s * n_prompts + pi];
            if (inst.failure) {
                ++m.failures;
                failures_j.push_back({{"system", inst.failure->system},
                                      {"prompt_id", inst.failure->prompt_id},
                                      {"error", inst.failure->error},
                                      {"partial", inst.failure->partial}});
                result.failures.push_back(std::move(*inst.failure));
                continue;
            }
            const GenerationRecord& rec = *inst.record;
            ++m.generated;
            if (inst.diversity.diversity) {
                divs.push_back(*inst.diversity.diversity);
            } else {
                ++m.too_short;
            }
            for (std::size_t n = 0; n < 3; ++n) {
                if (inst.diversity.rep[n]) reps[n].push_back(*inst.diversity.rep[n]);
            }
            nlohmann::json coh_j = nullptr;
            if (inst.coherence) {
                if (inst.coherence->degenerate) {
                    ++m.degenerate;
                } else {
                    cohs.push_back(inst.coherence->value);
                }
                coh_j = {{"value", inst.coherence->degenerate ? nlohmann::json(nullptr) : nlohmann::json(inst.coherence->value)},
                         {"tokens", inst.coherence->token_count},
                         {"degenerate", inst.coherence->degenerate}};
            }
            if (!reference_features.empty()) {
                gen_features.push_back(extract_features(config.metrics, &scorer, vocab.size, rec.continuation.view()));
            }
            nlohmann::json ij{{"prompt_id", rec.prompt_id},
                              {"seed", rec.seed},
                              {"stop_reason", to_string(rec.stop_reason)},
                              {"length", rec.continuation.size()},
                              {"diversity", inst.diversity.to_json()},
                              {"coherence", std::move(coh_j)}};
            if (!inst.metric_error.empty()) ij["metric_error"] = inst.metric_error;
            inst_j.push_back(std::move(ij));
            auto rj = rec.to_json();
            rj["system"] = m.name;
            records_j.push_back(std::move(rj));
            result.records.emplace_back(m.name, rec);
        }
        m.diversity = mean_of(divs);
        for (std::size_t n = 0; n < 3; ++n) m.rep[n] = mean_of(reps[n]);
        m.coherence = mean_of(cohs);
        if (!reference_features.empty() && !gen_features.empty()) {
            m.frontier = frontier_score(reference_features, gen_features,
                                        frontier_options(config.metrics, reference_features.size() + gen_features.size()));
        }
        auto sj = decodekit::to_json(m.spec);
        systems_j.push_back({{"name", m.name}, {"spec", std::move(sj)}, {"metrics", system_metrics_json(m)},
                             {"instances", std::move(inst_j)}});
        result.systems.push_back(std::move(m));
    }

    nlohmann::json rejected_j = nlohmann::json::array();
    for (const auto& r : prompts.rejected) rejected_j.push_back({{"line", r.line}, {"id", r.id}, {"reason", r.reason}});

    result.table = render_table(config.benchmark.name, result.systems);
    result.report = {
        {"tool", {{"name", kToolName}, {"version", kToolVersion}}},
        {"config", config.to_json()},
        {"prompts", {{"loaded", n_prompts}, {"rejected", std::move(rejected_j)}}},
        {"references", references ? nlohmann::json(references->prompts.size()) : nlohmann::json(nullptr)},
        {"systems", std::move(systems_j)},
        {"records", std::move(records_j)},
        {"failures", std::move(failures_j)},
        {"failure_count", result.failures.size()},
        {"warnings", result.warnings},
        {"table", result.table},
    };
    return result;
}

// ---------------------------------------------------------------------------
// k-sweep

SweepResult run_sweep(const SweepSpec& spec, const RunConfig& config) {
    if (spec.k_min < 1 || spec.k_min > spec.k_max) throw InputError("sweep needs 1 <= k_min <= k_max");
    if (!(spec.alpha >= 0.0 && spec.alpha <= 1.0)) throw InputError("sweep alpha must lie in [0, 1]");
    {
        const auto probe = load_model(config.model);
        if (spec.k_max > probe->vocabulary().size) {
            throw InputError("sweep k_max " + std::to_string(spec.k_max) + " exceeds the vocabulary size " +
                             std::to_string(probe->vocabulary().size));
        }
    }
    RunConfig swept = config;
    swept.systems.clear();
    for (std::size_t k = spec.k_min; k <= spec.k_max; ++k) {
        swept.systems.push_back({"contrastive-search-k" + std::to_string(k), ContrastiveSearch{k, spec.alpha}});
    }
    swept.systems.insert(swept.systems.end(), config.systems.begin(), config.systems.end());

    SweepResult out;
    out.benchmark = run_benchmark(swept);
    for (std::size_t i = 0; i < out.benchmark.systems.size(); ++i) {
        const auto& m = out.benchmark.systems[i];
        SweepRow row;
        row.label = m.name;
        row.strategy = strategy_name(m.spec);
        if (const auto* cs = std::get_if<ContrastiveSearch>(&m.spec)) {
            row.k = cs->k;
            row.alpha = cs->alpha;
        } else if (const auto* tk = std::get_if<TopK>(&m.spec)) {
            row.k = tk->k;
        } else if (const auto* cd = std::get_if<ContrastiveDecoding>(&m.spec)) {
            row.alpha = cd->alpha;
        }
        row.coherence = m.coherence;
        row.diversity = m.diversity;
        if (m.frontier) row.frontier = m.frontier->value;
        out.rows.push_back(std::move(row));
    }
    return out;
}

namespace {

std::string csv_num(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream ss;
    ss << std::setprecision(17) << *v;
    return ss.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

std::optional<double> parse_opt_double(const std::string& s) {
    if (s.empty()) return std::nullopt;
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw InputError("bad number \"" + s + "\" in sweep table");
    return v;
}

}  // namespace

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "label,strategy,k,alpha,coherence,diversity,frontier\n";
    for (const auto& r : rows) {
        if (r.label.find(',') != std::string::npos) throw InputError("sweep labels may not contain commas");
        out << r.label << ',' << r.strategy << ',' << (r.k ? std::to_string(*r.k) : "") << ',' << csv_num(r.alpha)
            << ',' << csv_num(r.coherence) << ',' << csv_num(r.diversity) << ',' << csv_num(r.frontier) << '\n';
    }
    return out.str();
}

std::vector<SweepRow> sweep_from_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || split_csv_line(line).size() != 7) throw InputError("sweep table has no valid header");
    std::vector<SweepRow> rows;
    try {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto c = split_csv_line(line);
            if (c.size() != 7) throw InputError("sweep row with " + std::to_string(c.size()) + " columns");
            SweepRow r;
            r.label = c[0];
            r.strategy = c[1];
            if (!c[2].empty()) r.k = static_cast<std::size_t>(std::stoull(c[2]));
            r.alpha = parse_opt_double(c[3]);
            r.coherence = parse_opt_double(c[4]);
            r.diversity = parse_opt_double(c[5]);
            r.frontier = parse_opt_double(c[6]);
            rows.push_back(std::move(r));
        }
    } catch (const std::logic_error& e) {
        throw InputError(std::string("malformed sweep table: ") + e.what());
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Standalone corpus metrics

CorpusEvaluation evaluate_corpus(const std::vector<LabeledRecord>& generated, const std::vector<Prompt>* references,
                                 const LanguageModel* scorer, std::size_t vocab_size, const MetricSettings& settings) {
    CorpusEvaluation out;
    SystemMetrics& m = out.aggregates;
    m.name = "corpus";
    std::vector<double> divs;
    std::array<std::vector<double>, 3> reps;
    std::vector<double> cohs;
    nlohmann::json inst_j = nlohmann::json::array();
    for (const auto& rec : generated) {
        ++m.generated;
        const DiversityReport d = diversity(rec.continuation);
        if (d.diversity) {
            divs.push_back(*d.diversity);
        } else {
            ++m.too_short;
        }
        for (std::size_t n = 0; n < 3; ++n) {
            if (d.rep[n]) reps[n].push_back(*d.rep[n]);
        }
        nlohmann::json coh_j = nullptr;
        if (scorer != nullptr && !rec.prompt.empty() && !rec.continuation.empty()) {
            const CoherenceScore c = coherence(*scorer, rec.prompt, rec.continuation);
            if (c.degenerate) {
                ++m.degenerate;
            } else {
                cohs.push_back(c.value);
            }
            coh_j = {{"value", c.degenerate ? nlohmann::json(nullptr) : nlohmann::json(c.value)},
                     {"tokens", c.token_count},
                     {"degenerate", c.degenerate}};
        }
        inst_j.push_back({{"prompt_id", rec.prompt_id},
                          {"length", rec.continuation.size()},
                          {"diversity", d.to_json()},
                          {"coherence", std::move(coh_j)}});
    }
    m.diversity = mean_of(divs);
    for (std::size_t n = 0; n < 3; ++n) m.rep[n] = mean_of(reps[n]);
    m.coherence = mean_of(cohs);
    if (references != nullptr && !references->empty() && !generated.empty()) {
        std::vector<std::vector<double>> p_feats;
        std::vector<std::vector<double>> q_feats;
        for (const auto& r : *references) p_feats.push_back(extract_features(settings, scorer, vocab_size, r.tokens));
        for (const auto& g : generated) q_feats.push_back(extract_features(settings, scorer, vocab_size, g.continuation));
        m.frontier = frontier_score(p_feats, q_feats, frontier_options(settings, p_feats.size() + q_feats.size()));
    }
    out.report = {{"tool", {{"name", kToolName}, {"version", kToolVersion}}},
                  {"settings", settings_json(settings)},
                  {"aggregates", system_metrics_json(m)},
                  {"instances", std::move(inst_j)},
                  {"references", references ? nlohmann::json(references->size()) : nlohmann::json(nullptr)}};
    return out;
}

// ---------------------------------------------------------------------------
// Pairwise

std::vector<LabeledRecord> labeled_records_from_jsonl(const std::vector<JsonLine>& lines) {
    std::vector<LabeledRecord> out;
    for (const auto& [line, v] : lines) {
        try {
            LabeledRecord r;
            r.prompt_id = id_to_string(v.at("prompt_id"));
            r.prompt = v.value("prompt", std::vector<TokenId>{});
            r.continuation = v.at("continuation").get<std::vector<TokenId>>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw InputError("line " + std::to_string(line) + ": malformed generation record: " + e.what());
        }
    }
    return out;
}

std::vector<LabeledRecord> load_labeled_records(const fs::path& path) {
    return labeled_records_from_jsonl(read_jsonl(path));
}

Worksheet pairwise_export(const std::vector<LabeledRecord>& records_a, const std::vector<LabeledRecord>& records_b,
                          const std::string& system_a, const std::string& system_b, std::uint64_t order_seed,
                          const std::optional<std::vector<std::string>>& prompt_ids, const Lexicon* lexicon) {
    if (system_a == system_b) throw InputError("pairwise export needs two distinct system names");
    auto index = [](const std::vector<LabeledRecord>& recs, const std::string& side) {
        std::map<std::string, const LabeledRecord*> m;
        for (const auto& r : recs) {
            if (!m.emplace(r.prompt_id, &r).second) {
                throw InputError("duplicate prompt id \"" + r.prompt_id + "\" in records for " + side);
            }
        }
        return m;
    };
    const auto a = index(records_a, system_a);
    const auto b = index(records_b, system_b);

    std::vector<std::string> ids;
    std::vector<std::string> missing;
    if (prompt_ids) {
        for (const auto& id : *prompt_ids) {
            if (!a.contains(id)) missing.push_back(id + " (absent from " + system_a + ")");
            if (!b.contains(id)) missing.push_back(id + " (absent from " + system_b + ")");
        }
        ids = *prompt_ids;
    } else {
        for (const auto& r : records_a) {
            if (!b.contains(r.prompt_id)) missing.push_back(r.prompt_id + " (absent from " + system_b + ")");
            ids.push_back(r.prompt_id);
        }
        for (const auto& r : records_b) {
            if (!a.contains(r.prompt_id)) missing.push_back(r.prompt_id + " (absent from " + system_a + ")");
        }
    }
    if (!missing.empty()) {
        std::string msg = "record sets are not aligned by prompt id:";
        for (const auto& m : missing) msg += " " + m + ";";
        throw InputError(msg);
    }

    Worksheet ws;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const LabeledRecord& ra = *a.at(ids[i]);
        const LabeledRecord& rb = *b.at(ids[i]);
        SampleStream coin(derive_seed(order_seed, "pairwise-order", i));
        const bool a_first = coin.uniform() < 0.5;
        const LabeledRecord& first = a_first ? ra : rb;
        const LabeledRecord& second = a_first ? rb : ra;
        nlohmann::json row{{"row", i}, {"prompt_id", ids[i]}, {"prompt", ra.prompt},
                           {"first", first.continuation}, {"second", second.continuation}};
        if (lexicon) {
            row["prompt_text"] = lexicon->detokenize(ra.prompt);
            row["first_text"] = lexicon->detokenize(first.continuation);
            row["second_text"] = lexicon->detokenize(second.continuation);
        }
        ws.rows.push_back(std::move(row));
        ws.key.push_back({{"row", i},
                          {"prompt_id", ids[i]},
                          {"system_a", system_a},
                          {"system_b", system_b},
                          {"first", a_first ? system_a : system_b},
                          {"second", a_first ? system_b : system_a}});
    }
    return ws;
}

nlohmann::json IngestResult::to_json() const {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : comparisons) {
        comps.push_back({{"prompt_id", c.prompt_id}, {"system_a", c.system_a}, {"system_b", c.system_b},
                         {"verdict", decodekit::to_string(c.verdict)}});
    }
    nlohmann::json j = test.to_json();
    j["comparisons"] = std::move(comps);
    j["unjudged"] = unjudged;
    if (!comparisons.empty()) {
        j["system_a"] = comparisons.front().system_a;
        j["system_b"] = comparisons.front().system_b;
    }
    return j;
}

IngestResult pairwise_ingest(const std::vector<JsonLine>& verdicts, const std::vector<JsonLine>& key) {
    struct KeyRow {
        std::string prompt_id, system_a, system_b, first, second;
    };
    std::map<std::uint64_t, KeyRow> rows;
    for (const auto& [line, v] : key) {
        try {
            KeyRow k{id_to_string(v.at("prompt_id")), v.at("system_a").get<std::string>(),
                     v.at("system_b").get<std::string>(), v.at("first").get<std::string>(),
                     v.at("second").get<std::string>()};
            if (!rows.emplace(v.at("row").get<std::uint64_t>(), std::move(k)).second) {
                throw InputError("key line " + std::to_string(line) + ": duplicate row id");
            }
        } catch (const nlohmann::json::exception& e) {
            throw InputError("key line " + std::to_string(line) + ": " + e.what());
        }
    }

    IngestResult out;
    std::set<std::uint64_t> judged;
    for (const auto& [line, v] : verdicts) {
        std::uint64_t row = 0;
        std::string verdict;
        try {
            row = v.at("row").get<std::uint64_t>();
            verdict = v.at("verdict").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw InputError("verdict line " + std::to_string(line) + ": " + e.what());
        }
        const auto it = rows.find(row);
        if (it == rows.end()) {
            throw InputError("verdict line " + std::to_string(line) + ": row " + std::to_string(row) +
                             " is not in the key");
        }
        if (!judged.insert(row).second) {
            throw InputError("verdict line " + std::to_string(line) + ": row " + std::to_string(row) + " judged twice");
        }
        const KeyRow& k = it->second;
        PairwiseComparison c{k.prompt_id, k.system_a, k.system_b, Verdict::Neutral};
        if (verdict == "first" || verdict == "second") {
            const std::string& winner = verdict == "first" ? k.first : k.second;
            c.verdict = winner == k.system_a ? Verdict::AWins : Verdict::BWins;
        } else if (verdict != "neutral") {
            throw InputError("verdict line " + std::to_string(line) + ": verdict must be first, second or neutral");
        }
        out.comparisons.push_back(std::move(c));
    }
    out.unjudged = rows.size() - judged.size();
    out.test = sign_test(out.comparisons);
    return out;
}

}  // namespace decodekit
