#pragma once

#include <stdexcept>
#include <string>

namespace gist {

// Mirrors gist_status in the C header; keep the numeric values in sync.
enum class ErrorCode : int {
  invalid_argument = 1,
  parse = 2,
  io = 3,
  not_found = 4,
  dimension_mismatch = 5,
  precondition = 6,
  provider = 7,
  numeric = 8,
  config = 9,
  stage = 10,
  conflict = 11,
  internal = 12,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised by run_pipeline when a stage fails; carries the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(ErrorCode::stage, "stage '" + stage + "' failed: " + what),
        stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace gist
