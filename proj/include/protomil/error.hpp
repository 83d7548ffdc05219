#pragma once

#include <stdexcept>
#include <string>

namespace protomil {

// Every failure raised by the library derives from Error; kind() is the
// stable machine-readable tag the CLI prints and maps onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message) : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct InvalidInputError : Error {
  explicit InvalidInputError(const std::string& m) : Error("invalid_input", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension_mismatch", m) {}
};
struct InvariantError : Error {
  explicit InvariantError(const std::string& m) : Error("invariant_violation", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};
struct MissingFileError : Error {
  explicit MissingFileError(const std::string& m) : Error("missing_file", m) {}
};
struct SchemaError : Error {
  explicit SchemaError(const std::string& m) : Error("schema", m) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& m) : Error("numerical_abort", m) {}
};

}  // namespace protomil
