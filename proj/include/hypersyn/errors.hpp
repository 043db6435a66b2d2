#pragma once

#include <stdexcept>
#include <string>

namespace hypersyn {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Arithmetic would exceed the credit-amount range.
struct OverflowError : Error {
    explicit OverflowError(const std::string& what) : Error(what) {}
};

// Insert of a key that is already present.
struct KeyExistsError : Error {
    explicit KeyExistsError(const std::string& what) : Error(what) {}
};

// Update/delete of a key that is not present.
struct KeyAbsentError : Error {
    explicit KeyAbsentError(const std::string& what) : Error(what) {}
};

// Trade rejected: requested output meets or exceeds the reserve.
struct InsufficientDepthError : Error {
    explicit InsufficientDepthError(const std::string& what) : Error(what) {}
};

// Counterparty state moved between planning and execution.
struct StaleReservesError : Error {
    explicit StaleReservesError(const std::string& what) : Error(what) {}
};

struct PeerUnreachableError : Error {
    explicit PeerUnreachableError(const std::string& what) : Error(what) {}
};

// Pruned replica asked about a subtree it does not keep.
struct OutOfScopeError : Error {
    explicit OutOfScopeError(const std::string& what) : Error(what) {}
};

struct SignatureError : Error {
    explicit SignatureError(const std::string& what) : Error(what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(what) {}
};

struct ProtocolError : Error {
    explicit ProtocolError(const std::string& what) : Error(what) {}
};

}  // namespace hypersyn
