#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dconn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Malformed input data. Carries the 1-based line number when one is known.
class DataError : public Error {
  public:
    explicit DataError(const std::string &what, std::size_t line = 0)
        : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

    /// The same error with `context: ` prepended to the message.
    DataError with_context(const std::string &context) const {
        DataError e(*this);
        static_cast<Error &>(e) = Error(context + ": " + what());
        return e;
    }

  private:
    std::size_t line_;
};

/// Shapes or sizes that do not agree.
class DimensionError : public Error {
  public:
    using Error::Error;
};

/// Training produced a NaN or infinity.
class NumericError : public Error {
  public:
    using Error::Error;
};

} // namespace dconn
