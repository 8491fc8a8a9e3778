#include "decodekit/cli.hpp"

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "decodekit/decoding.hpp"
#include "decodekit/harness.hpp"
#include "decodekit/metrics.hpp"
#include "decodekit/remote.hpp"

namespace decodekit {

namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted.store(true); }

struct GenerateFlags {
    std::string model;
    std::string endpoint;
    std::string amateur;
    std::string amateur_endpoint;
    std::string strategy;
    std::optional<std::size_t> k;
    std::optional<double> alpha;
    std::optional<double> p;
    std::optional<double> tau;
    std::optional<double> amateur_temperature;
    std::string prompts;
    std::size_t prompt_length = 32;
    std::size_t max_length = 256;
    std::uint64_t seed = 0;
    std::string out;
    std::string trace;
    std::size_t jobs = 0;
};

struct BenchFlags {
    std::string config;
    std::string out;
    std::string table;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
};

struct SweepFlags {
    std::string config;
    std::size_t k_min = 2;
    std::size_t k_max = 10;
    double alpha = 0.6;
    std::string out;
    std::string report;
    std::optional<std::size_t> jobs;
};

struct MetricsFlags {
    std::string continuations;
    std::string references;
    std::string scorer;
    std::string scorer_endpoint;
    std::optional<std::size_t> vocab_size;
    std::size_t truncate = kFrontierTruncation;
    std::string features = kBigramFeatures;
    std::size_t bins = 0;
    double scaling = 5.0;
    std::size_t grid = 25;
    std::uint64_t seed = 0;
    std::string out;
};

struct PairExportFlags {
    std::string a;
    std::string b;
    std::string system_a = "A";
    std::string system_b = "B";
    std::uint64_t order_seed = 0;
    std::string ids;
    std::string worksheet;
    std::string key;
};

struct PairIngestFlags {
    std::string verdicts;
    std::string key;
    std::string out;
};

struct ServeFlags {
    std::string spec;
    std::string host = "127.0.0.1";
    std::uint16_t port = 7878;
    std::string port_file;
};

struct Flags {
    GenerateFlags generate;
    BenchFlags bench;
    SweepFlags sweep;
    MetricsFlags metrics;
    PairExportFlags pair_export;
    PairIngestFlags pair_ingest;
    ServeFlags serve;
};

const std::vector<std::string> kStrategies{"greedy",  "top-k", "nucleus", "typical", "contrastive-decoding",
                                           "contrastive-search"};

void build(CLI::App& app, Flags& f) {
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    auto* gen = app.add_subcommand("generate", "Generate continuations for a prompt file");
    gen->add_option("--model", f.generate.model, "Toy model spec (JSON file)");
    gen->add_option("--endpoint", f.generate.endpoint, "Backend endpoint host:port (default: $DECODEKIT_ENDPOINT)");
    gen->add_option("--amateur", f.generate.amateur, "Amateur toy model spec for contrastive decoding");
    gen->add_option("--amateur-endpoint", f.generate.amateur_endpoint, "Amateur backend endpoint host:port");
    gen->add_option("--strategy", f.generate.strategy, "Decoding strategy")
        ->required()
        ->check(CLI::IsMember(kStrategies));
    gen->add_option("--k", f.generate.k, "Candidates for top-k (default 50) or contrastive search (default 5)");
    gen->add_option("--alpha", f.generate.alpha,
                    "Contrastive search penalty weight (default 0.6) or contrastive decoding plausibility (default 0.1)");
    gen->add_option("--p", f.generate.p, "Nucleus mass (default 0.95)");
    gen->add_option("--tau", f.generate.tau, "Typical mass (default 0.95)");
    gen->add_option("--amateur-temperature", f.generate.amateur_temperature,
                    "Amateur temperature for contrastive decoding (default 0.5)");
    gen->add_option("--prompts", f.generate.prompts, "Prompt JSON Lines file")->required();
    gen->add_option("--prompt-length", f.generate.prompt_length, "Prompt length in tokens")->capture_default_str();
    gen->add_option("--max-length", f.generate.max_length, "Maximum continuation length")->capture_default_str();
    gen->add_option("--seed", f.generate.seed, "Master seed")->capture_default_str();
    gen->add_option("--out", f.generate.out, "Output JSON Lines file (default: stdout)");
    gen->add_option("--trace", f.generate.trace, "Write per-step traces as JSON Lines");
    gen->add_option("--jobs", f.generate.jobs, "Worker threads (0: all cores)")->capture_default_str();

    auto* bench = app.add_subcommand("bench", "Run a benchmark from a run config");
    bench->add_option("--config", f.bench.config, "Run config JSON")->required();
    bench->add_option("--out", f.bench.out, "Report JSON file (default: stdout)");
    bench->add_option("--table", f.bench.table, "Also write the plain-text table here");
    bench->add_option("--seed", f.bench.seed, "Override the config's master seed");
    bench->add_option("--jobs", f.bench.jobs, "Override the config's worker count");

    auto* sweep = app.add_subcommand("sweep", "Contrastive-search k sweep with baselines");
    sweep->add_option("--config", f.sweep.config, "Run config JSON")->required();
    sweep->add_option("--k-min", f.sweep.k_min, "Smallest k")->capture_default_str();
    sweep->add_option("--k-max", f.sweep.k_max, "Largest k")->capture_default_str();
    sweep->add_option("--alpha", f.sweep.alpha, "Fixed penalty weight")->capture_default_str();
    sweep->add_option("--out", f.sweep.out, "Plot-ready CSV (default: stdout)");
    sweep->add_option("--report", f.sweep.report, "Full JSON report of the underlying runs");
    sweep->add_option("--jobs", f.sweep.jobs, "Override the config's worker count");

    auto* metrics = app.add_subcommand("metrics", "Score generated continuations");
    metrics->add_option("--continuations", f.metrics.continuations, "Generation records (JSON Lines)")->required();
    metrics->add_option("--references", f.metrics.references, "Human continuations (JSON Lines)");
    metrics->add_option("--scorer", f.metrics.scorer, "Scorer toy model spec (enables coherence)");
    metrics->add_option("--scorer-endpoint", f.metrics.scorer_endpoint, "Scorer backend endpoint host:port");
    metrics->add_option("--vocab-size", f.metrics.vocab_size, "Vocabulary size when no scorer is given");
    metrics->add_option("--truncate", f.metrics.truncate, "Frontier truncation length")->capture_default_str();
    metrics->add_option("--features", f.metrics.features, "Frontier feature extractor")
        ->check(CLI::IsMember({std::string(kBigramFeatures), std::string(kMeanRepresentationFeatures)}))
        ->capture_default_str();
    metrics->add_option("--bins", f.metrics.bins, "Quantization bins (0: samples / 10)")->capture_default_str();
    metrics->add_option("--scaling", f.metrics.scaling, "Frontier scaling constant")->capture_default_str();
    metrics->add_option("--grid", f.metrics.grid, "Interior mixture weights")->capture_default_str();
    metrics->add_option("--seed", f.metrics.seed, "k-means seed")->capture_default_str();
    metrics->add_option("--out", f.metrics.out, "Report JSON file (default: stdout)");

    auto* pexp = app.add_subcommand("pair-export", "Blind pairwise worksheet for human graders");
    pexp->add_option("--a", f.pair_export.a, "Records of system A (JSON Lines)")->required();
    pexp->add_option("--b", f.pair_export.b, "Records of system B (JSON Lines)")->required();
    pexp->add_option("--system-a", f.pair_export.system_a, "Name of system A")->capture_default_str();
    pexp->add_option("--system-b", f.pair_export.system_b, "Name of system B")->capture_default_str();
    pexp->add_option("--order-seed", f.pair_export.order_seed, "Seed for presentation order")->capture_default_str();
    pexp->add_option("--ids", f.pair_export.ids, "File listing prompt ids to export (JSON array or one per line)");
    pexp->add_option("--worksheet", f.pair_export.worksheet, "Worksheet output (JSON Lines)")->required();
    pexp->add_option("--key", f.pair_export.key, "Blind key output (JSON Lines)")->required();

    auto* ping = app.add_subcommand("pair-ingest", "De-blind verdicts and run the sign test");
    ping->add_option("--verdicts", f.pair_ingest.verdicts, "Verdicts (JSON Lines)")->required();
    ping->add_option("--key", f.pair_ingest.key, "Blind key (JSON Lines)")->required();
    ping->add_option("--out", f.pair_ingest.out, "Result JSON file (default: stdout)");

    auto* serve = app.add_subcommand("serve-toy", "Serve a toy model over the backend protocol");
    serve->add_option("--spec", f.serve.spec, "Toy model spec (JSON file)")->required();
    serve->add_option("--host", f.serve.host, "Bind address")->capture_default_str();
    serve->add_option("--port", f.serve.port, "Port (0: any free port)")->capture_default_str();
    serve->add_option("--port-file", f.serve.port_file, "Write the bound port to this file");
}

nlohmann::json read_json_file(const std::string& path) {
    const std::string text = read_text_file(path);
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw InputError(path + ": not valid JSON");
    return j;
}

/// Writes to `path`, or to `out` when the path is empty.
void emit(const std::string& path, const std::string& data, std::ostream& out) {
    if (path.empty()) {
        out << data;
    } else {
        write_text_file(path, data);
    }
}

std::unique_ptr<LanguageModel> model_from_flags(const std::string& spec_path, const std::string& endpoint,
                                                bool fall_back_to_env) {
    if (!spec_path.empty()) return load_model(read_json_file(spec_path));
    if (!endpoint.empty()) return std::make_unique<RemoteModel>(Endpoint::parse(endpoint));
    if (fall_back_to_env) return std::make_unique<RemoteModel>(endpoint_from_env());
    return nullptr;
}

DecodeSpec spec_from_flags(const GenerateFlags& g) {
    nlohmann::json j{{"strategy", g.strategy}};
    if (g.k) j["k"] = *g.k;
    if (g.alpha) j["alpha"] = *g.alpha;
    if (g.p) j["p"] = *g.p;
    if (g.tau) j["tau"] = *g.tau;
    if (g.amateur_temperature) j["amateur_temperature"] = *g.amateur_temperature;
    return decode_spec_from_json(j);
}

int cmd_generate(const GenerateFlags& g, std::ostream& out, std::ostream& err) {
    const DecodeSpec spec = spec_from_flags(g);
    const auto model = model_from_flags(g.model, g.endpoint, true);
    std::unique_ptr<LanguageModel> amateur;
    if (needs_amateur(spec)) {
        amateur = model_from_flags(g.amateur, g.amateur_endpoint, false);
        if (!amateur) throw InputError("contrastive decoding needs --amateur or --amateur-endpoint");
    }
    std::optional<Lexicon> lexicon;
    if (!g.model.empty()) lexicon = lexicon_from_model_spec(read_json_file(g.model));
    const PromptSet prompts = load_prompts(g.prompts, g.prompt_length, model->vocabulary(),
                                            lexicon ? &*lexicon : nullptr);
    for (const auto& w : prompts.warnings) err << "warning: " << w << '\n';

    const std::string system = strategy_name(spec);
    const std::size_t n = prompts.prompts.size();
    std::vector<std::string> lines(n);
    std::vector<std::string> traces(n);
    std::vector<std::string> errors(n);
    std::vector<ErrorKind> error_kinds(n, ErrorKind::Input);
    const DecoderModels models{model.get(), amateur.get()};
    const bool tracing = !g.trace.empty();

    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
            const Prompt& p = prompts.prompts[i];
            std::ostringstream trace_buf;
            TraceSink sink;
            if (tracing) {
                sink = [&](const StepTrace& st) {
                    auto j = st.to_json();
                    j["prompt_id"] = p.id;
                    trace_buf << j.dump() << '\n';
                };
            }
            try {
                GenerationRecord rec = generate(models, TokenSequence(model->vocabulary(), p.tokens), spec,
                                                g.max_length, derive_seed(g.seed, system, i), sink);
                rec.prompt_id = p.id;
                lines[i] = rec.to_json().dump() + "\n";
                traces[i] = trace_buf.str();
            } catch (const Error& e) {
                errors[i] = e.what();
                error_kinds[i] = e.kind();
            }
        }
    };
    std::size_t jobs = g.jobs == 0 ? std::max(1u, std::thread::hardware_concurrency()) : g.jobs;
    jobs = std::min(jobs, std::max<std::size_t>(n, 1));
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 1; w < jobs; ++w) pool.emplace_back(work);
        work();
    }

    std::string data;
    std::string trace_data;
    int code = kExitOk;
    for (std::size_t i = 0; i < n; ++i) {
        if (!errors[i].empty()) {
            err << "error: prompt \"" << prompts.prompts[i].id << "\": " << errors[i] << '\n';
            code = std::max(code, exit_code_for(error_kinds[i]));
            continue;
        }
        data += lines[i];
        trace_data += traces[i];
    }
    emit(g.out, data, out);
    if (tracing) write_text_file(g.trace, trace_data);
    return code;
}

int cmd_bench(const BenchFlags& b, std::ostream& out, std::ostream& err) {
    RunConfig cfg = RunConfig::load(b.config);
    if (b.seed) cfg.seed = *b.seed;
    if (b.jobs) cfg.jobs = *b.jobs;
    const BenchmarkResult r = run_benchmark(cfg);
    for (const auto& w : r.warnings) err << "warning: " << w << '\n';
    emit(b.out, r.report.dump(2) + "\n", out);
    if (!b.table.empty()) write_text_file(b.table, r.table);
    err << r.table;
    if (!r.failures.empty()) err << r.failures.size() << " generation(s) failed; see the report\n";
    return kExitOk;
}

int cmd_sweep(const SweepFlags& s, std::ostream& out, std::ostream& err) {
    RunConfig cfg = RunConfig::load(s.config);
    if (s.jobs) cfg.jobs = *s.jobs;
    const SweepResult r = run_sweep(SweepSpec{s.k_min, s.k_max, s.alpha}, cfg);
    for (const auto& w : r.benchmark.warnings) err << "warning: " << w << '\n';
    emit(s.out, sweep_to_csv(r.rows), out);
    if (!s.report.empty()) write_text_file(s.report, r.benchmark.report.dump(2) + "\n");
    err << r.benchmark.table;
    return kExitOk;
}

int cmd_metrics(const MetricsFlags& m, std::ostream& out, std::ostream&) {
    const auto scorer = model_from_flags(m.scorer, m.scorer_endpoint, false);
    std::size_t vocab_size = 0;
    if (scorer) {
        vocab_size = scorer->vocabulary().size;
    } else if (m.vocab_size) {
        vocab_size = *m.vocab_size;
    } else {
        throw InputError("metrics needs --scorer, --scorer-endpoint or --vocab-size");
    }
    const Vocabulary vocab = Vocabulary::make(vocab_size);

    const auto lines = read_jsonl(m.continuations);
    std::vector<LabeledRecord> generated;
    for (const auto& [line, v] : lines) {
        LabeledRecord r;
        try {
            r.prompt_id = v.contains("prompt_id") ? (v.at("prompt_id").is_string() ? v.at("prompt_id").get<std::string>()
                                                                                    : v.at("prompt_id").dump())
                                                  : std::to_string(generated.size());
            r.prompt = v.value("prompt", std::vector<TokenId>{});
            r.continuation = v.contains("continuation") ? v.at("continuation").get<std::vector<TokenId>>()
                                                        : v.at("tokens").get<std::vector<TokenId>>();
        } catch (const nlohmann::json::exception& e) {
            throw InputError(m.continuations + ":" + std::to_string(line) + ": " + e.what());
        }
        validate_tokens(r.prompt, vocab);
        validate_tokens(r.continuation, vocab);
        generated.push_back(std::move(r));
    }
    std::optional<PromptSet> refs;
    if (!m.references.empty()) refs = parse_prompts(read_jsonl(m.references), 0, vocab);

    MetricSettings settings;
    settings.num_bins = m.bins;
    settings.scaling_constant = m.scaling;
    settings.grid_points = m.grid;
    settings.features = m.features;
    settings.truncate = m.truncate;
    settings.seed = m.seed;
    const CorpusEvaluation ev =
        evaluate_corpus(generated, refs ? &refs->prompts : nullptr, scorer.get(), vocab_size, settings);
    emit(m.out, ev.report.dump(2) + "\n", out);
    return kExitOk;
}

std::vector<std::string> read_id_list(const std::string& path) {
    const std::string text = read_text_file(path);
    const nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    std::vector<std::string> ids;
    if (!j.is_discarded() && j.is_array()) {
        for (const auto& v : j) ids.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        return ids;
    }
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    return ids;
}

int cmd_pair_export(const PairExportFlags& p, std::ostream&, std::ostream& err) {
    std::optional<std::vector<std::string>> ids;
    if (!p.ids.empty()) ids = read_id_list(p.ids);
    const Worksheet ws = pairwise_export(load_labeled_records(p.a), load_labeled_records(p.b), p.system_a, p.system_b,
                                         p.order_seed, ids);
    std::ostringstream rows;
    std::ostringstream key;
    write_jsonl(rows, ws.rows);
    write_jsonl(key, ws.key);
    write_text_file(p.worksheet, rows.str());
    write_text_file(p.key, key.str());
    err << "exported " << ws.rows.size() << " worksheet rows\n";
    return kExitOk;
}

int cmd_pair_ingest(const PairIngestFlags& p, std::ostream& out, std::ostream&) {
    const IngestResult r = pairwise_ingest(read_jsonl(p.verdicts), read_jsonl(p.key));
    emit(p.out, r.to_json().dump(2) + "\n", out);
    return kExitOk;
}

int cmd_serve_toy(const ServeFlags& s, std::ostream&, std::ostream& err) {
    const auto model = toy_model_from_json(read_json_file(s.spec));
    ModelServer server(*model, s.host, s.port);
    if (!s.port_file.empty()) write_text_file(s.port_file, std::to_string(server.port()) + "\n");
    err << "listening on " << s.host << ":" << server.port() << std::endl;
    g_interrupted.store(false);
    auto prev_int = std::signal(SIGINT, on_signal);
    auto prev_term = std::signal(SIGTERM, on_signal);
    server.start();
    while (!g_interrupted.load()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    server.stop();
    std::signal(SIGINT, prev_int);
    std::signal(SIGTERM, prev_term);
    return kExitOk;
}

}  // namespace

int exit_code_for(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Input:
        case ErrorKind::Undefined:
            return kExitInput;
        case ErrorKind::Transport:
        case ErrorKind::Protocol:
            return kExitBackend;
    }
    return kExitInput;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Decoding strategies and evaluation for open-ended text generation", "decodekit"};
    Flags f;
    build(app, f);
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitInput;
    }
    try {
        if (app.got_subcommand("generate")) return cmd_generate(f.generate, out, err);
        if (app.got_subcommand("bench")) return cmd_bench(f.bench, out, err);
        if (app.got_subcommand("sweep")) return cmd_sweep(f.sweep, out, err);
        if (app.got_subcommand("metrics")) return cmd_metrics(f.metrics, out, err);
        if (app.got_subcommand("pair-export")) return cmd_pair_export(f.pair_export, out, err);
        if (app.got_subcommand("pair-ingest")) return cmd_pair_ingest(f.pair_ingest, out, err);
        if (app.got_subcommand("serve-toy")) return cmd_serve_toy(f.serve, out, err);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitInput;
    }
    return kExitInput;
}

std::vector<SubcommandFlags> cli_flag_inventory() {
    CLI::App app{"Decoding strategies and evaluation for open-ended text generation", "decodekit"};
    Flags f;
    build(app, f);
    std::vector<SubcommandFlags> out;
    for (const CLI::App* sub : app.get_subcommands({})) {
        SubcommandFlags s;
        s.name = sub->get_name();
        for (const CLI::Option* opt : sub->get_options()) {
            for (const auto& l : opt->get_lnames()) s.flags.push_back("--" + l);
        }
        s.help = sub->help(app.get_name());
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace decodekit
