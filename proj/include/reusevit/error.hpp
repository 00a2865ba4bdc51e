// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace reusevit {

/// Base class of every error raised by the library. `code()` is a stable,
/// machine-parsable identifier that the CLI prints verbatim.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error("E_SHAPE", w) {}
};
struct IndexError : Error {
  explicit IndexError(const std::string& w) : Error("E_INDEX", w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error("E_CONTRACT", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("E_CONFIG", w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error("E_FORMAT", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("E_IO", w) {}
};
/// A reuse step found no cached activation for a reference it depends on.
struct CacheIntegrityError : Error {
  explicit CacheIntegrityError(const std::string& w) : Error("E_CACHE", w) {}
};
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& w) : Error("E_DIVERGED", w) {}
};

}  // namespace reusevit
