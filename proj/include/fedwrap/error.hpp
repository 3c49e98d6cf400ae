#pragma once

#include <stdexcept>
#include <string>

namespace fedwrap {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid model spec, hyperparameters or configuration file.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Caller handed an operation an input of the wrong shape or an empty batch.
class InputError : public Error {
public:
    using Error::Error;
};

/// Malformed model bytes, version mismatch or inconsistent block shapes.
class DecodeError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class IngestionError : public Error {
public:
    using Error::Error;
};

class PartitionError : public Error {
public:
    using Error::Error;
};

/// Heterogeneous translators, mismatched class counts across peers.
class FederationError : public Error {
public:
    using Error::Error;
};

class AggregationError : public Error {
public:
    using Error::Error;
};

class RoundTimeout : public Error {
public:
    using Error::Error;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

class TransportError : public Error {
public:
    TransportError(const std::string& what, bool retriable = true)
        : Error(what), retriable_(retriable) {}
    bool retriable() const noexcept { return retriable_; }

private:
    bool retriable_;
};

/// The endpoint could not be bound, resolved or reached; nothing was exchanged yet.
class ConnectError : public TransportError {
public:
    explicit ConnectError(const std::string& what) : TransportError(what, false) {}
};

class LifecycleError : public Error {
public:
    using Error::Error;
};

class EvaluationError : public Error {
public:
    using Error::Error;
};

/// The local model cannot provide what the chosen wrapper mode needs
/// (e.g. a hidden feature vector from a non-parametric model).
class UnsupportedModelError : public Error {
public:
    using Error::Error;
};

/// Stopped by an operator signal.
class Interrupted : public Error {
public:
    using Error::Error;
};

} // namespace fedwrap
