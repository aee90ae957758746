#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace meda {

enum class Modality : std::uint8_t { Text = 0, Vision = 1 };

inline char modality_char(Modality m) {
    return m == Modality::Text ? 'T' : 'V';
}

// Matrix/vector dimension mismatches.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Violated preconditions (non-normalized rows, empty caches, bad config values).
class ContractError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Trace load/store failures, with the failure class preserved so callers
// (and the CLI exit-code mapping) can tell them apart.
class TraceError : public std::runtime_error {
public:
    enum class Kind { BadMagic, VersionMismatch, Truncated, ShapeMismatch, Io };

    TraceError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}

    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

}  // namespace meda
