#pragma once

// Newline-delimited JSON protocol for out-of-process language models.
//
//   {"op":"hello"}                                   -> {"vocab_size":N,"eod":E,"dim":D}
//   {"op":"step","tokens":[...]}                     -> {"probs":[...],"reprs":[[...],...]}
//   {"op":"score","prefix":[...],"continuation":[...]} -> {"logprobs":[...]}
//
// Failures are answered with {"error":"..."} and the connection stays open.
// A log-probability of -inf is encoded as null.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "decodekit/lm_interface.hpp"

namespace decodekit {

struct Endpoint {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;

    /// "host:port" or ":port"; throws InputError otherwise.
    static Endpoint parse(std::string_view text);
    std::string to_string() const { return host + ":" + std::to_string(port); }
};

/// Name of the environment variable holding the default backend endpoint.
inline constexpr const char* kEndpointEnvVar = "DECODEKIT_ENDPOINT";

/// Endpoint from DECODEKIT_ENDPOINT; InputError when unset.
Endpoint endpoint_from_env();

/// Client side of the protocol. Performs the handshake in the constructor and
/// keeps a small pool of connections so concurrent callers do not serialize on
/// one socket.
class RemoteModel final : public LanguageModel {
public:
    explicit RemoteModel(Endpoint endpoint, std::chrono::milliseconds timeout = std::chrono::seconds(10),
                         std::size_t max_idle_connections = 8);
    ~RemoteModel() override;

    RemoteModel(const RemoteModel&) = delete;
    RemoteModel& operator=(const RemoteModel&) = delete;

    const Vocabulary& vocabulary() const noexcept override { return vocab_; }
    std::size_t representation_dim() const noexcept override { return dim_; }
    const Endpoint& endpoint() const noexcept { return endpoint_; }

protected:
    StepOutput do_step(std::span<const TokenId> context) const override;
    std::vector<double> do_score(std::span<const TokenId> prefix,
                                 std::span<const TokenId> continuation) const override;

private:
    class Connection;

    nlohmann::json request(const nlohmann::json& message) const;
    std::unique_ptr<Connection> acquire() const;
    void release(std::unique_ptr<Connection> conn) const;

    Endpoint endpoint_;
    std::chrono::milliseconds timeout_;
    std::size_t max_idle_;
    Vocabulary vocab_;
    std::size_t dim_ = 0;
    mutable std::mutex pool_mutex_;
    mutable std::vector<std::unique_ptr<Connection>> idle_;
};

/// Convenience spelling of step() against a backend.
StepOutput remote_step(const RemoteModel& backend, const TokenSequence& context);

/// Answers one protocol line against `model`. Never throws: errors become
/// {"error": ...} responses.
nlohmann::json handle_protocol_line(const LanguageModel& model, std::string_view line);

/// Serves `model` over TCP, one thread per connection.
class ModelServer {
public:
    /// Binds and listens immediately; port 0 picks a free port. Throws
    /// TransportError when the address cannot be bound.
    ModelServer(const LanguageModel& model, const std::string& host, std::uint16_t port);
    ~ModelServer();

    ModelServer(const ModelServer&) = delete;
    ModelServer& operator=(const ModelServer&) = delete;

    std::uint16_t port() const noexcept { return port_; }

    /// Accept loop on a background thread.
    void start();
    /// Blocks in the accept loop until stop() is called from elsewhere.
    void serve();
    void stop();

private:
    void handle_connection(int fd);

    const LanguageModel& model_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    std::thread accept_thread_;
    std::mutex workers_mutex_;
    std::vector<std::thread> workers_;
};

}  // namespace decodekit
