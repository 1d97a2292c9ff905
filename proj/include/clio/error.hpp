#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace clio {

/// Error categories surfaced by the engine. Names mirror the contract errors
/// that callers (CLI, HTTP API) report back to users.
enum class Errc {
  empty_question,
  invalid_argument,
  invalid_config,
  provider_unavailable,
  transport,  // transient, retried by the gateway
  malformed_response,
  empty_input,
  budget_exceeded,
  cancelled,
  empty_graph,
  too_few_events,
  too_few_samples,
  unknown_run,
  unknown_channel,
  illegal_state,
  view_unavailable,
  parse_error,
  duplicate_id,
  zero_baseline,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Raised by config validation; carries every offending field.
class ConfigError : public Error {
 public:
  struct Field {
    std::string name;
    std::string message;
  };

  explicit ConfigError(std::vector<Field> fields);

  const std::vector<Field>& fields() const noexcept { return fields_; }

 private:
  std::vector<Field> fields_;
};

}  // namespace clio
