#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace star {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A row that should be a probability distribution is not one.
class DistributionError : public Error {
public:
    DistributionError(std::size_t row, const std::string& what)
        : Error("row " + std::to_string(row) + ": " + what), row_(row) {}
    std::size_t row() const noexcept { return row_; }

private:
    std::size_t row_;
};

/// Teacher and student traces cannot be paired layer-to-layer.
class AlignmentError : public Error {
public:
    using Error::Error;
};

/// Invalid model, loss or run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite values or divergence during training.
class NumericError : public Error {
public:
    NumericError(long step, std::string term, const std::string& what)
        : Error(what), step_(step), term_(std::move(term)) {}
    long step() const noexcept { return step_; }
    const std::string& term() const noexcept { return term_; }

private:
    long step_;
    std::string term_;
};

/// File system or file format failure.
class IoError : public Error {
public:
    using Error::Error;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace star
