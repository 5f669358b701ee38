#pragma once

#include <stdexcept>
#include <string>

namespace tsce {

// Root of every exception the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define TSCE_DECLARE_ERROR(Name)          \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

TSCE_DECLARE_ERROR(ParseError);
TSCE_DECLARE_ERROR(LabelError);
TSCE_DECLARE_ERROR(DomainError);
TSCE_DECLARE_ERROR(ShapeError);
TSCE_DECLARE_ERROR(StateError);
TSCE_DECLARE_ERROR(SpecError);
TSCE_DECLARE_ERROR(UnsupportedError);

#undef TSCE_DECLARE_ERROR

/// Malformed file content. `line()` is 1-based, 0 when not line-oriented.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Non-finite values during training or optimisation. `epoch()` is -1 when
/// the failure is not tied to an epoch.
class NumericsError : public Error {
 public:
  explicit NumericsError(const std::string& what, long epoch = -1)
      : Error(epoch < 0 ? what : what + " (epoch " + std::to_string(epoch) + ")"),
        epoch_(epoch) {}
  long epoch() const noexcept { return epoch_; }

 private:
  long epoch_;
};

}  // namespace tsce
