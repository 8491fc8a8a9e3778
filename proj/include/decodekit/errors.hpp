#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "decodekit/types.hpp"

namespace decodekit {

enum class ErrorKind {
    Input,      // caller supplied something that violates a precondition
    Transport,  // backend unreachable, timed out, or dropped the connection
    Protocol,   // backend answered with something we cannot accept
    Undefined,  // the requested quantity has no defined value for this input
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class InputError : public Error {
public:
    explicit InputError(const std::string& what) : Error(ErrorKind::Input, what) {}
};

class TransportError : public Error {
public:
    explicit TransportError(const std::string& what) : Error(ErrorKind::Transport, what) {}
};

class ProtocolError : public Error {
public:
    explicit ProtocolError(const std::string& what) : Error(ErrorKind::Protocol, what) {}
};

class UndefinedResultError : public Error {
public:
    explicit UndefinedResultError(const std::string& what) : Error(ErrorKind::Undefined, what) {}
};

/// Raised by generate() when a step fails; keeps the tokens produced so far.
class GenerationError : public Error {
public:
    GenerationError(ErrorKind cause, const std::string& what, std::vector<TokenId> partial)
        : Error(cause, what), partial_(std::move(partial)) {}
    const std::vector<TokenId>& partial_continuation() const noexcept { return partial_; }

private:
    std::vector<TokenId> partial_;
};

}  // namespace decodekit
