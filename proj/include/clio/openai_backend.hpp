#pragma once

#include <chrono>
#include <optional>
#include <string>

#include "clio/model.hpp"

namespace clio {

struct OpenAIConfig {
  std::string api_base;  // e.g. https://api.openai.com/v1
  std::string api_key;
  std::string model;
  std::string embed_model;
  std::chrono::seconds timeout{120};

  /// Reads CLIO_API_BASE, CLIO_API_KEY, CLIO_MODEL and CLIO_EMBED_MODEL.
  /// Returns nullopt when CLIO_API_BASE is unset.
  static std::optional<OpenAIConfig> from_environment();
};

/// OpenAI-compatible chat-completions and embeddings over HTTP(S).
/// Connection failures, 408, 429 and 5xx map to Error(transport).
class OpenAIBackend : public ModelBackend {
 public:
  explicit OpenAIBackend(OpenAIConfig config);

  ModelResponse complete(const ModelRequest& request) override;
  std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override;
  std::string name() const override { return "openai-compatible"; }

  /// Wire bodies, exposed for tests.
  json chat_body(const ModelRequest& request) const;
  static ModelResponse parse_chat_response(const json& body);
  static std::vector<EmbeddingVector> parse_embedding_response(const json& body, std::size_t expected);

 private:
  json post(const std::string& path, const json& body) const;

  OpenAIConfig config_;
  std::string origin_;  // scheme://host[:port]
  std::string prefix_;  // path prefix, no trailing slash
};

}  // namespace clio
