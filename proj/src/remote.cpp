#include "decodekit/remote.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <numeric>

namespace decodekit {

namespace {

constexpr double kBackendSumTolerance = 1e-4;
constexpr double kRenormalizeAbove = 1e-6;
constexpr std::size_t kMaxLineBytes = std::size_t{256} << 20;

std::string errno_text() { return std::strerror(errno); }

class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    ~Fd() { reset(); }
    int get() const noexcept { return fd_; }
    int release() noexcept { return std::exchange(fd_, -1); }
    void reset() noexcept {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

int remaining_ms(std::chrono::steady_clock::time_point deadline) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    return static_cast<int>(std::max<std::int64_t>(0, left.count()));
}

void write_all(int fd, std::string_view data, std::chrono::steady_clock::time_point deadline) {
    while (!data.empty()) {
        pollfd p{fd, POLLOUT, 0};
        const int ready = ::poll(&p, 1, remaining_ms(deadline));
        if (ready == 0) throw TransportError("timed out writing to backend");
        if (ready < 0) {
            if (errno == EINTR) continue;
            throw TransportError("poll failed: " + errno_text());
        }
        const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            throw TransportError("send failed: " + errno_text());
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Endpoint

Endpoint Endpoint::parse(std::string_view text) {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos) throw InputError("endpoint must look like host:port, got \"" + std::string(text) + "\"");
    Endpoint ep;
    if (colon > 0) ep.host = std::string(text.substr(0, colon));
    const std::string port_text(text.substr(colon + 1));
    char* end = nullptr;
    const long port = std::strtol(port_text.c_str(), &end, 10);
    if (port_text.empty() || *end != '\0' || port < 0 || port > 65535) {
        throw InputError("invalid port in endpoint \"" + std::string(text) + "\"");
    }
    ep.port = static_cast<std::uint16_t>(port);
    return ep;
}

Endpoint endpoint_from_env() {
    const char* v = std::getenv(kEndpointEnvVar);
    if (v == nullptr || *v == '\0') {
        throw InputError(std::string("no backend endpoint configured and ") + kEndpointEnvVar + " is unset");
    }
    return Endpoint::parse(v);
}

// ---------------------------------------------------------------------------
// Client

class RemoteModel::Connection {
public:
    Connection(const Endpoint& ep, std::chrono::milliseconds timeout) : timeout_(timeout) {
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        const std::string port = std::to_string(ep.port);
        if (int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
            throw TransportError("cannot resolve " + ep.to_string() + ": " + ::gai_strerror(rc));
        }
        std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, &::freeaddrinfo);
        const auto deadline = std::chrono::steady_clock::now() + timeout_;
        std::string last_error = "no address";
        for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
            Fd fd(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
            if (fd.get() < 0) {
                last_error = errno_text();
                continue;
            }
            const int flags = ::fcntl(fd.get(), F_GETFL, 0);
            ::fcntl(fd.get(), F_SETFL, flags | O_NONBLOCK);
            if (::connect(fd.get(), ai->ai_addr, ai->ai_addrlen) != 0 && errno != EINPROGRESS) {
                last_error = errno_text();
                continue;
            }
            pollfd p{fd.get(), POLLOUT, 0};
            const int ready = ::poll(&p, 1, remaining_ms(deadline));
            if (ready <= 0) {
                last_error = ready == 0 ? "connect timed out" : errno_text();
                continue;
            }
            int err = 0;
            socklen_t len = sizeof err;
            ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
            if (err != 0) {
                last_error = std::strerror(err);
                continue;
            }
            const int one = 1;
            ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            fd_ = std::move(fd);
            return;
        }
        throw TransportError("cannot connect to " + ep.to_string() + ": " + last_error);
    }

    std::string round_trip(const std::string& line) {
        const auto deadline = std::chrono::steady_clock::now() + timeout_;
        write_all(fd_.get(), line + "\n", deadline);
        for (;;) {
            if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
                std::string out = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return out;
            }
            if (buffer_.size() > kMaxLineBytes) throw ProtocolError("backend response line too long");
            pollfd p{fd_.get(), POLLIN, 0};
            const int ready = ::poll(&p, 1, remaining_ms(deadline));
            if (ready == 0) throw TransportError("timed out waiting for backend response");
            if (ready < 0) {
                if (errno == EINTR) continue;
                throw TransportError("poll failed: " + errno_text());
            }
            char chunk[65536];
            const ssize_t n = ::recv(fd_.get(), chunk, sizeof chunk, 0);
            if (n == 0) throw TransportError("backend closed the connection");
            if (n < 0) {
                if (errno == EINTR || errno == EAGAIN) continue;
                throw TransportError("recv failed: " + errno_text());
            }
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

private:
    Fd fd_;
    std::chrono::milliseconds timeout_;
    std::string buffer_;
};

RemoteModel::RemoteModel(Endpoint endpoint, std::chrono::milliseconds timeout, std::size_t max_idle_connections)
    : endpoint_(std::move(endpoint)), timeout_(timeout), max_idle_(max_idle_connections) {
    const nlohmann::json hello = request({{"op", "hello"}});
    try {
        std::optional<TokenId> eod;
        if (hello.contains("eod") && !hello.at("eod").is_null()) eod = hello.at("eod").get<TokenId>();
        const auto size = hello.at("vocab_size").get<std::int64_t>();
        const auto dim = hello.at("dim").get<std::int64_t>();
        if (size < 2 || dim < 1) throw ProtocolError("handshake declared an invalid vocabulary size or dimension");
        if (eod && (*eod < 0 || *eod >= size)) throw ProtocolError("handshake declared an out-of-range eod id");
        vocab_ = Vocabulary{static_cast<std::size_t>(size), eod};
        dim_ = static_cast<std::size_t>(dim);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed handshake: ") + e.what());
    }
}

RemoteModel::~RemoteModel() = default;

std::unique_ptr<RemoteModel::Connection> RemoteModel::acquire() const {
    {
        std::lock_guard lock(pool_mutex_);
        if (!idle_.empty()) {
            auto c = std::move(idle_.back());
            idle_.pop_back();
            return c;
        }
    }
    return std::make_unique<Connection>(endpoint_, timeout_);
}

void RemoteModel::release(std::unique_ptr<Connection> conn) const {
    std::lock_guard lock(pool_mutex_);
    if (idle_.size() < max_idle_) idle_.push_back(std::move(conn));
}

nlohmann::json RemoteModel::request(const nlohmann::json& message) const {
    auto conn = acquire();
    // A connection that throws mid-exchange is dropped, not returned to the pool.
    const std::string reply = conn->round_trip(message.dump());
    release(std::move(conn));
    nlohmann::json parsed = nlohmann::json::parse(reply, nullptr, false);
    if (parsed.is_discarded() || !parsed.is_object()) throw ProtocolError("backend sent a non-JSON-object line");
    if (parsed.contains("error")) {
        throw ProtocolError("backend error: " + parsed.at("error").dump());
    }
    return parsed;
}

StepOutput RemoteModel::do_step(std::span<const TokenId> context) const {
    const nlohmann::json reply =
        request({{"op", "step"}, {"tokens", std::vector<TokenId>(context.begin(), context.end())}});
    StepOutput out;
    try {
        const auto& probs = reply.at("probs");
        if (!probs.is_array() || probs.size() != vocab_.size) {
            throw ProtocolError("backend returned " + std::to_string(probs.size()) +
                                " probabilities for a vocabulary of " + std::to_string(vocab_.size));
        }
        out.distribution.reserve(vocab_.size);
        for (const auto& p : probs) {
            const double v = p.get<double>();
            if (!(v >= 0.0) || !std::isfinite(v)) throw ProtocolError("backend returned an invalid probability");
            out.distribution.push_back(v);
        }
        const double sum = std::accumulate(out.distribution.begin(), out.distribution.end(), 0.0);
        if (std::abs(sum - 1.0) > kBackendSumTolerance) {
            throw ProtocolError("backend distribution sums to " + std::to_string(sum));
        }
        if (std::abs(sum - 1.0) > kRenormalizeAbove) {
            for (double& v : out.distribution) v /= sum;
        }
        const auto& reprs = reply.at("reprs");
        if (!reprs.is_array() || reprs.size() != context.size()) {
            throw ProtocolError("backend returned " + std::to_string(reprs.size()) + " representations for " +
                                std::to_string(context.size()) + " context tokens");
        }
        out.representations = RepresentationMatrix(dim_);
        out.representations.reserve(context.size());
        std::vector<double> row;
        for (const auto& r : reprs) {
            row = r.get<std::vector<double>>();
            if (row.size() != dim_) throw ProtocolError("backend representation has the wrong dimension");
            out.representations.append(row);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed step response: ") + e.what());
    }
    return out;
}

std::vector<double> RemoteModel::do_score(std::span<const TokenId> prefix,
                                          std::span<const TokenId> continuation) const {
    const nlohmann::json reply = request({{"op", "score"},
                                          {"prefix", std::vector<TokenId>(prefix.begin(), prefix.end())},
                                          {"continuation", std::vector<TokenId>(continuation.begin(), continuation.end())}});
    std::vector<double> out;
    try {
        const auto& lps = reply.at("logprobs");
        if (!lps.is_array() || lps.size() != continuation.size()) {
            throw ProtocolError("backend returned the wrong number of log-probabilities");
        }
        for (const auto& lp : lps) {
            out.push_back(lp.is_null() ? -std::numeric_limits<double>::infinity() : lp.get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed score response: ") + e.what());
    }
    return out;
}

StepOutput remote_step(const RemoteModel& backend, const TokenSequence& context) {
    return step(backend, context);
}

// ---------------------------------------------------------------------------
// Server

nlohmann::json handle_protocol_line(const LanguageModel& model, std::string_view line) {
    try {
        const nlohmann::json msg = nlohmann::json::parse(line);
        const std::string op = msg.at("op").get<std::string>();
        if (op == "hello") {
            const auto& v = model.vocabulary();
            return {{"vocab_size", v.size},
                    {"eod", v.eod ? nlohmann::json(*v.eod) : nlohmann::json(nullptr)},
                    {"dim", model.representation_dim()}};
        }
        if (op == "step") {
            const auto tokens = msg.at("tokens").get<std::vector<TokenId>>();
            const StepOutput s = model.step(tokens);
            nlohmann::json reprs = nlohmann::json::array();
            for (std::size_t i = 0; i < s.representations.rows(); ++i) {
                const auto r = s.representations.row(i);
                reprs.push_back(std::vector<double>(r.begin(), r.end()));
            }
            return {{"probs", s.distribution}, {"reprs", std::move(reprs)}};
        }
        if (op == "score") {
            const auto prefix = msg.at("prefix").get<std::vector<TokenId>>();
            const auto cont = msg.at("continuation").get<std::vector<TokenId>>();
            const ScoredSequence scored = model.score(prefix, cont);
            nlohmann::json lps = nlohmann::json::array();
            for (double lp : scored.logprobs) {
                lps.push_back(std::isfinite(lp) ? nlohmann::json(lp) : nlohmann::json(nullptr));
            }
            return {{"logprobs", std::move(lps)}};
        }
        return {{"error", "unknown op \"" + op + "\""}};
    } catch (const std::exception& e) {
        return {{"error", e.what()}};
    }
}

ModelServer::ModelServer(const LanguageModel& model, const std::string& host, std::uint16_t port) : model_(model) {
    Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (fd.get() < 0) throw TransportError("socket failed: " + errno_text());
    const int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    const std::string bind_host = host == "localhost" ? "127.0.0.1" : host;
    if (::inet_pton(AF_INET, bind_host.c_str(), &addr.sin_addr) != 1) {
        throw InputError("cannot parse IPv4 address \"" + host + "\"");
    }
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        throw TransportError("cannot bind " + host + ":" + std::to_string(port) + ": " + errno_text());
    }
    if (::listen(fd.get(), 64) != 0) throw TransportError("listen failed: " + errno_text());
    socklen_t len = sizeof addr;
    ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    listen_fd_ = fd.release();
}

ModelServer::~ModelServer() {
    stop();
    if (listen_fd_ >= 0) ::close(listen_fd_);
}

void ModelServer::start() {
    accept_thread_ = std::thread([this] { serve(); });
}

void ModelServer::serve() {
    while (!stopping_.load()) {
        pollfd p{listen_fd_, POLLIN, 0};
        const int ready = ::poll(&p, 1, 100);
        if (ready <= 0) continue;
        const int client = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
        if (client < 0) continue;
        std::lock_guard lock(workers_mutex_);
        workers_.emplace_back([this, client] { handle_connection(client); });
    }
}

void ModelServer::stop() {
    stopping_.store(true);
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::thread> workers;
    {
        std::lock_guard lock(workers_mutex_);
        workers.swap(workers_);
    }
    for (auto& w : workers) {
        if (w.joinable()) w.join();
    }
}

void ModelServer::handle_connection(int raw_fd) {
    Fd fd(raw_fd);
    const int one = 1;
    ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::string buffer;
    char chunk[65536];
    while (!stopping_.load()) {
        pollfd p{fd.get(), POLLIN, 0};
        const int ready = ::poll(&p, 1, 100);
        if (ready == 0) continue;
        if (ready < 0) {
            if (errno == EINTR) continue;
            return;
        }
        const ssize_t n = ::recv(fd.get(), chunk, sizeof chunk, 0);
        if (n <= 0) return;
        buffer.append(chunk, static_cast<std::size_t>(n));
        std::size_t nl;
        while ((nl = buffer.find('\n')) != std::string::npos) {
            const std::string line = buffer.substr(0, nl);
            buffer.erase(0, nl + 1);
            if (line.empty()) continue;
            const std::string reply = handle_protocol_line(model_, line).dump() + "\n";
            try {
                write_all(fd.get(), reply, std::chrono::steady_clock::now() + std::chrono::seconds(30));
            } catch (const TransportError&) {
                return;
            }
        }
        if (buffer.size() > kMaxLineBytes) {
            const std::string reply = nlohmann::json{{"error", "request line too long"}}.dump() + "\n";
            buffer.clear();
            try {
                write_all(fd.get(), reply, std::chrono::steady_clock::now() + std::chrono::seconds(30));
            } catch (const TransportError&) {
                return;
            }
        }
    }
}

}  // namespace decodekit
