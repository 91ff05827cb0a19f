#pragma once

#include <stdexcept>
#include <string>

namespace ssda {

// Invalid configuration values or incompatible option combinations.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or image shapes that do not fit an operation.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf losses or logits, divergence.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LoaderErrorKind {
  missing_file,
  empty_manifest,
  malformed_row,
  unresolvable_path,
  label_out_of_range,
};

const char* to_string(LoaderErrorKind kind);

class LoaderError : public std::runtime_error {
 public:
  LoaderError(LoaderErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

  LoaderErrorKind kind() const { return kind_; }

 private:
  LoaderErrorKind kind_;
};

}  // namespace ssda
