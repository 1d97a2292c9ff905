#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clio/types.hpp"

namespace clio {

struct Message {
  std::string role;  // system | user | assistant
  std::string content;

  friend bool operator==(const Message&, const Message&) = default;
};

enum class ResponseFormat { free_text, structured };

struct ToolDescriptor {
  std::string name;
  std::string description;
  json parameters = json::object();
};

struct ModelRequest {
  std::vector<Message> messages;
  double temperature = 0.7;
  int max_tokens = 1024;
  ResponseFormat response_format = ResponseFormat::free_text;
  std::vector<ToolDescriptor> tools;

  // Routing metadata. Never sent to a provider and not part of the canonical
  // key, but scripted rules may match on it.
  std::string purpose;
  std::string channel_id;
};

struct ToolInvocation {
  std::string name;
  json arguments = json::object();
};

struct Usage {
  int prompt_tokens = 0;
  int completion_tokens = 0;
};

struct ModelResponse {
  std::string text;
  std::optional<ToolInvocation> tool_invocation;
  Usage usage;
};

struct EmbeddingVector {
  std::vector<double> values;
  std::size_t dimension() const noexcept { return values.size(); }
};

/// Cosine similarity; 0 when either vector has zero norm.
double cosine(const EmbeddingVector& a, const EmbeddingVector& b);

/// Canonical serialization of (messages, temperature, response_format).
std::string canonical_request(const ModelRequest& request);
/// 16 hex digits of FNV-1a/64 over canonical_request().
std::string request_key(const ModelRequest& request);

std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// A provider. Implementations throw Error(transport) for transient failures
/// the gateway should retry, and other Errors for permanent ones.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;
  virtual ModelResponse complete(const ModelRequest& request) = 0;
  virtual std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) = 0;
  virtual std::string name() const = 0;
};

void to_json(json& j, const Message& m);
void to_json(json& j, const ModelResponse& r);
ModelResponse response_from_json(const json& j);

}  // namespace clio
