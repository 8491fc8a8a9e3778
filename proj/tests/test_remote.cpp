#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "decodekit/decoding.hpp"
#include "decodekit/remote.hpp"
#include "support/random_models.hpp"

using namespace decodekit;
using namespace decodekit::testing;
using namespace std::chrono_literals;

namespace {

/// Declares `vocab` tokens but answers with `width` probabilities summing to `mass`.
class LyingModel final : public LanguageModel {
public:
    LyingModel(std::size_t vocab, std::size_t width, double mass)
        : vocab_(Vocabulary::make(vocab)), width_(width), mass_(mass) {}
    const Vocabulary& vocabulary() const noexcept override { return vocab_; }
    std::size_t representation_dim() const noexcept override { return 2; }

protected:
    StepOutput do_step(std::span<const TokenId> context) const override {
        StepOutput out{std::vector<double>(width_, mass_ / double(width_)), RepresentationMatrix(2)};
        for (std::size_t i = 0; i < context.size(); ++i) out.representations.append(std::vector<double>{1.0, 0.0});
        return out;
    }

private:
    Vocabulary vocab_;
    std::size_t width_;
    double mass_;
};

/// Minimal blocking line client for raw protocol checks.
class RawClient {
public:
    explicit RawClient(std::uint16_t port) : fd_(::socket(AF_INET, SOCK_STREAM, 0)) {
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
        if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) std::abort();
    }
    ~RawClient() { ::close(fd_); }

    nlohmann::json ask(const std::string& line) {
        const std::string msg = line + "\n";
        ::send(fd_, msg.data(), msg.size(), MSG_NOSIGNAL);
        std::string reply;
        char c = 0;
        while (::recv(fd_, &c, 1, 0) == 1 && c != '\n') reply.push_back(c);
        return nlohmann::json::parse(reply);
    }

private:
    int fd_;
};

/// A port nobody listens on: bind an ephemeral port, then release it.
std::uint16_t closed_port() {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    socklen_t len = sizeof addr;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    ::close(fd);
    return ntohs(addr.sin_port);
}

}  // namespace

TEST(Endpoint, Parse) {
    const auto e = Endpoint::parse("localhost:8080");
    EXPECT_EQ(e.host, "localhost");
    EXPECT_EQ(e.port, 8080);
    EXPECT_EQ(Endpoint::parse(":9").host, "127.0.0.1");
    EXPECT_THROW(Endpoint::parse("nohost"), InputError);
    EXPECT_THROW(Endpoint::parse("h:99999"), InputError);
    EXPECT_THROW(Endpoint::parse("h:x"), InputError);
}

TEST(Endpoint, FromEnvironment) {
    ::unsetenv(kEndpointEnvVar);
    EXPECT_THROW(endpoint_from_env(), InputError);
    ::setenv(kEndpointEnvVar, "127.0.0.1:4321", 1);
    EXPECT_EQ(endpoint_from_env().port, 4321);
    ::unsetenv(kEndpointEnvVar);
}

TEST(Protocol, HandleLineAnswersErrorsInsteadOfThrowing) {
    const auto m = TableModel::unconditional(Vocabulary::make(3, 2), {0.5, 0.25, 0.25});
    EXPECT_EQ(handle_protocol_line(m, R"({"op":"hello"})"),
              nlohmann::json::parse(R"({"vocab_size":3,"eod":2,"dim":3})"));
    EXPECT_TRUE(handle_protocol_line(m, "not json").contains("error"));
    EXPECT_TRUE(handle_protocol_line(m, R"({"op":"fly"})").contains("error"));
    EXPECT_TRUE(handle_protocol_line(m, R"({"op":"step","tokens":[9]})").contains("error"));
    EXPECT_TRUE(handle_protocol_line(m, R"({"op":"step","tokens":[]})").contains("error"));
    const auto zero = TableModel::unconditional(Vocabulary::make(2), {1.0, 0.0});
    const auto scored = handle_protocol_line(zero, R"({"op":"score","prefix":[0],"continuation":[0,1]})");
    EXPECT_EQ(scored.at("logprobs")[0], 0.0);
    EXPECT_TRUE(scored.at("logprobs")[1].is_null());
}

TEST(Loopback, ObservationallyEquivalentOnRandomContexts) {
    std::mt19937_64 gen(17);
    const auto m = random_table_model(gen);
    ModelServer server(m, "127.0.0.1", 0);
    server.start();
    RemoteModel remote(Endpoint{"127.0.0.1", server.port()});
    EXPECT_EQ(remote.vocabulary(), m.vocabulary());
    EXPECT_EQ(remote.representation_dim(), m.representation_dim());
    for (int trial = 0; trial < 100; ++trial) {
        const auto ctx = random_context(gen, m.vocabulary().size, 1, 10);
        EXPECT_EQ(remote.step(ctx), m.step(ctx));
        const TokenSequence seq(m.vocabulary(), ctx);
        EXPECT_EQ(remote_step(remote, seq), step(m, seq));
        const auto cont = random_context(gen, m.vocabulary().size, 1, 6);
        EXPECT_EQ(remote.score(ctx, cont).logprobs, m.score(ctx, cont).logprobs);
        EXPECT_EQ(remote.candidate_representation(ctx, 0), m.candidate_representation(ctx, 0));
    }
    // Whole generations agree, including contrastive search.
    const TokenSequence prompt(m.vocabulary(), {0, 1});
    for (const DecodeSpec& spec : {DecodeSpec{ContrastiveSearch{}}, DecodeSpec{Typical{0.9}}}) {
        EXPECT_EQ(generate({&remote}, prompt, spec, 30, 4).to_json(), generate({&m}, prompt, spec, 30, 4).to_json());
    }
    server.stop();
}

TEST(Loopback, ServerErrorsSurfaceAsProtocolErrors) {
    const auto m = TableModel::unconditional(Vocabulary::make(3), {0.5, 0.25, 0.25});
    ModelServer server(m, "127.0.0.1", 0);
    server.start();
    RemoteModel remote(Endpoint{"127.0.0.1", server.port()});
    // Out-of-range tokens are caught locally before any request is sent.
    EXPECT_THROW(remote.step(std::vector<TokenId>{5}), InputError);
    server.stop();
}

TEST(Loopback, MalformedLineLeavesConnectionUsable) {
    const auto m = TableModel::unconditional(Vocabulary::make(3, 2), {0.5, 0.25, 0.25});
    ModelServer server(m, "127.0.0.1", 0);
    server.start();
    RawClient raw(server.port());
    EXPECT_TRUE(raw.ask("{{{").contains("error"));
    EXPECT_EQ(raw.ask(R"({"op":"hello"})").at("vocab_size"), 3);
    EXPECT_EQ(raw.ask(R"({"op":"step","tokens":[1]})").at("probs").size(), 3u);
    server.stop();
}

TEST(Loopback, ShapeMismatchIsProtocolError) {
    LyingModel liar(4, 3, 1.0);
    ModelServer server(liar, "127.0.0.1", 0);
    server.start();
    RemoteModel remote(Endpoint{"127.0.0.1", server.port()});
    EXPECT_THROW(remote.step(std::vector<TokenId>{0}), ProtocolError);
    server.stop();
}

TEST(Loopback, BadMassIsProtocolError) {
    LyingModel liar(4, 4, 0.9);
    ModelServer server(liar, "127.0.0.1", 0);
    server.start();
    RemoteModel remote(Endpoint{"127.0.0.1", server.port()});
    EXPECT_THROW(remote.step(std::vector<TokenId>{0}), ProtocolError);
    server.stop();
}

TEST(Loopback, SmallMassDriftIsRenormalized) {
    LyingModel liar(4, 4, 1.0 + 5e-5);
    ModelServer server(liar, "127.0.0.1", 0);
    server.start();
    RemoteModel remote(Endpoint{"127.0.0.1", server.port()});
    const auto d = remote.step(std::vector<TokenId>{0}).distribution;
    EXPECT_NEAR(d[0] + d[1] + d[2] + d[3], 1.0, 1e-12);
    server.stop();
}

TEST(Transport, UnreachableEndpointFailsFast) {
    const auto start = std::chrono::steady_clock::now();
    EXPECT_THROW(RemoteModel(Endpoint{"127.0.0.1", closed_port()}, 500ms), TransportError);
    EXPECT_LT(std::chrono::steady_clock::now() - start, 2s);
}

TEST(Transport, SilentBackendTimesOut) {
    // A listening socket that never accepts: connect succeeds, hello never returns.
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    ASSERT_EQ(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
    ASSERT_EQ(::listen(fd, 4), 0);
    socklen_t len = sizeof addr;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    const auto start = std::chrono::steady_clock::now();
    EXPECT_THROW(RemoteModel(Endpoint{"127.0.0.1", ntohs(addr.sin_port)}, 300ms), TransportError);
    const auto elapsed = std::chrono::steady_clock::now() - start;
    EXPECT_GE(elapsed, 250ms);
    EXPECT_LT(elapsed, 3s);
    ::close(fd);
}

TEST(Server, PortInUseIsTransportError) {
    const auto m = TableModel::unconditional(Vocabulary::make(2), {0.5, 0.5});
    ModelServer first(m, "127.0.0.1", 0);
    EXPECT_THROW(ModelServer(m, "127.0.0.1", first.port()), TransportError);
}
