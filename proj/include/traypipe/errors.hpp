#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace traypipe {

/// Malformed configuration, fixture, or palette.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An operation was handed arguments that violate its preconditions
/// (out-of-bounds box, dimension mismatch, invalid permutation, ...).
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File could not be read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A model backend failed mid-stage. The driver marks the tray failed
/// and the batch continues.
class StageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Crop count and metadata row count disagree for a tray. Carries both
/// counts; the tray is flagged and its crops are still written.
class MetadataMismatch : public std::runtime_error {
public:
    MetadataMismatch(std::size_t crop_count, std::size_t row_count)
        : std::runtime_error("metadata mismatch: " + std::to_string(crop_count) +
                             " crops vs " + std::to_string(row_count) + " metadata rows"),
          crop_count_(crop_count),
          row_count_(row_count) {}

    std::size_t crop_count() const { return crop_count_; }
    std::size_t row_count() const { return row_count_; }

private:
    std::size_t crop_count_;
    std::size_t row_count_;
};

} // namespace traypipe
