#pragma once

#include <stdexcept>
#include <string>

namespace milsurv {

enum class ErrorKind {
  dimension,
  configuration,
  empty_bag,
  contract,
  corrupt_file,
  registry,
  alignment,
  ingestion,
  degenerate_cohort,
  undefined_metric,
  non_finite,
  io,
};

const char* to_string(ErrorKind kind);

/// True for errors caused by bad user input (exit code 1 in the CLI);
/// everything else is a runtime failure (exit code 2).
bool is_validation_error(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const char* message) {
  if (!condition) fail(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace milsurv
