// SPDX-License-Identifier: Apache-2.0
//
// Error types shared across the library. Every failure surfaces as one of
// these; the CLI maps them onto process exit codes.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lgp {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced or detected.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Precondition or configuration value out of range.
class ValidationError : public Error {
public:
    using Error::Error;
};

enum class FormatErrc : std::uint8_t {
    io,
    bad_magic,
    unsupported_version,
    truncated,
    corrupt_header,
    label_out_of_range,
    duplicate_name,
    shape_mismatch,
    missing_tensor,
    bad_manifest,
    checksum_mismatch,
};

inline std::string_view to_string(FormatErrc code) {
    switch (code) {
        case FormatErrc::io: return "io";
        case FormatErrc::bad_magic: return "bad_magic";
        case FormatErrc::unsupported_version: return "unsupported_version";
        case FormatErrc::truncated: return "truncated";
        case FormatErrc::corrupt_header: return "corrupt_header";
        case FormatErrc::label_out_of_range: return "label_out_of_range";
        case FormatErrc::duplicate_name: return "duplicate_name";
        case FormatErrc::shape_mismatch: return "shape_mismatch";
        case FormatErrc::missing_tensor: return "missing_tensor";
        case FormatErrc::bad_manifest: return "bad_manifest";
        case FormatErrc::checksum_mismatch: return "checksum_mismatch";
    }
    return "unknown";
}

/// Malformed file or archive. Carries a typed code so callers can branch on it.
class FormatError : public Error {
public:
    FormatError(FormatErrc code, const std::string& what)
        : Error(std::string(to_string(code)) + ": " + what), code_(code) {}

    FormatErrc code() const noexcept { return code_; }

private:
    FormatErrc code_;
};

}  // namespace lgp
