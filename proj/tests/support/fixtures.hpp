#pragma once

// Scratch directories and small benchmark inputs for harness and CLI tests.

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "decodekit/types.hpp"

namespace decodekit::testing {

class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("decodekit-test-" + std::to_string(rd()) + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) { write_file(p, j.dump(2)); }

/// `count` prompts {"id": "p<i>", "tokens": [...]} of `length` ids in [0, vocab - 1).
inline void write_prompts(const std::filesystem::path& p, std::size_t count, std::size_t length, std::size_t vocab,
                          std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(vocab - 2));
    std::string text;
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<TokenId> t(length);
        for (auto& x : t) x = tok(rng);
        text += nlohmann::json{{"id", "p" + std::to_string(i)}, {"tokens", t}}.dump() + "\n";
    }
    write_file(p, text);
}

/// Bigram-ish n-gram over 12 tokens with end-of-document id 11.
inline nlohmann::json toy_ngram_spec() {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<TokenId> tok(0, 10);
    nlohmann::json corpus = nlohmann::json::array();
    for (int s = 0; s < 6; ++s) {
        std::vector<TokenId> seq(40);
        for (auto& x : seq) x = tok(rng);
        seq.push_back(11);
        corpus.push_back(seq);
    }
    return {{"type", "ngram"}, {"vocab_size", 12}, {"eod", 11}, {"order", 3}, {"smoothing", 0.05},
            {"corpus", corpus}};
}

/// Weaker model for contrastive decoding: unigram statistics of the same corpus.
inline nlohmann::json toy_amateur_spec() {
    auto s = toy_ngram_spec();
    s["order"] = 1;
    s["smoothing"] = 0.5;
    return s;
}

}  // namespace decodekit::testing
