#include "clio/openai_backend.hpp"

#include <cstdlib>

#include "clio/error.hpp"

#include <httplib.h>

namespace clio {

namespace {

std::string env_or(const char* name, std::string fallback = {}) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

}  // namespace

std::optional<OpenAIConfig> OpenAIConfig::from_environment() {
  auto base = env_or("CLIO_API_BASE");
  if (base.empty()) return std::nullopt;
  OpenAIConfig c;
  c.api_base = base;
  c.api_key = env_or("CLIO_API_KEY");
  c.model = env_or("CLIO_MODEL", "gpt-4.1");
  c.embed_model = env_or("CLIO_EMBED_MODEL", "text-embedding-3-large");
  return c;
}

OpenAIBackend::OpenAIBackend(OpenAIConfig config) : config_(std::move(config)) {
  const auto& base = config_.api_base;
  auto scheme_end = base.find("://");
  if (scheme_end == std::string::npos)
    throw Error(Errc::invalid_config, "CLIO_API_BASE must include a scheme: " + base);
  auto path_start = base.find('/', scheme_end + 3);
  origin_ = base.substr(0, path_start);
  prefix_ = path_start == std::string::npos ? "" : base.substr(path_start);
  while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
#if !defined(CPPHTTPLIB_OPENSSL_SUPPORT)
  if (base.rfind("https://", 0) == 0)
    throw Error(Errc::invalid_config, "built without TLS support; cannot reach " + base);
#endif
}

json OpenAIBackend::chat_body(const ModelRequest& request) const {
  json messages = json::array();
  for (const auto& m : request.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  json body = {{"model", config_.model},
               {"messages", std::move(messages)},
               {"temperature", request.temperature},
               {"max_tokens", request.max_tokens}};
  if (!request.tools.empty()) {
    json tools = json::array();
    for (const auto& t : request.tools)
      tools.push_back({{"type", "function"},
                       {"function",
                        {{"name", t.name}, {"description", t.description}, {"parameters", t.parameters}}}});
    body["tools"] = std::move(tools);
  }
  return body;
}

ModelResponse OpenAIBackend::parse_chat_response(const json& body) {
  try {
    const auto& message = body.at("choices").at(0).at("message");
    ModelResponse r;
    if (auto it = message.find("content"); it != message.end() && it->is_string()) r.text = it->get<std::string>();
    if (auto calls = message.find("tool_calls"); calls != message.end() && calls->is_array() && !calls->empty()) {
      const auto& fn = calls->at(0).at("function");
      ToolInvocation call;
      call.name = fn.at("name").get<std::string>();
      const auto& args = fn.value("arguments", json("{}"));
      if (args.is_string()) {
        call.arguments = json::parse(args.get<std::string>(), nullptr, false);
        if (call.arguments.is_discarded()) call.arguments = json{{"raw", args.get<std::string>()}};
      } else {
        call.arguments = args;
      }
      r.tool_invocation = std::move(call);
    }
    if (auto usage = body.find("usage"); usage != body.end() && usage->is_object()) {
      r.usage.prompt_tokens = usage->value("prompt_tokens", 0);
      r.usage.completion_tokens = usage->value("completion_tokens", 0);
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_response, std::string("unexpected chat response shape: ") + e.what());
  }
}

std::vector<EmbeddingVector> OpenAIBackend::parse_embedding_response(const json& body,
                                                                    std::size_t expected) {
  try {
    std::vector<EmbeddingVector> out(expected);
    std::size_t seen = 0;
    for (const auto& item : body.at("data")) {
      auto index = item.value("index", seen);
      if (index >= expected) throw Error(Errc::malformed_response, "embedding index out of range");
      out[index].values = item.at("embedding").get<std::vector<double>>();
      ++seen;
    }
    if (seen != expected) throw Error(Errc::malformed_response, "embedding count mismatch");
    return out;
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_response, std::string("unexpected embedding response: ") + e.what());
  }
}

json OpenAIBackend::post(const std::string& path, const json& body) const {
  httplib::Client client(origin_);
  client.set_connection_timeout(std::chrono::seconds(10));
  client.set_read_timeout(config_.timeout);
  client.set_write_timeout(config_.timeout);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  auto res = client.Post(prefix_ + path, headers, body.dump(), "application/json");
  if (!res) throw Error(Errc::transport, "request failed: " + httplib::to_string(res.error()));
  if (res->status == 408 || res->status == 429 || res->status >= 500)
    throw Error(Errc::transport, "provider returned HTTP " + std::to_string(res->status));
  if (res->status >= 400)
    throw Error(Errc::provider_unavailable,
                "provider rejected request (HTTP " + std::to_string(res->status) + "): " + res->body);
  auto parsed = json::parse(res->body, nullptr, false);
  if (parsed.is_discarded()) throw Error(Errc::malformed_response, "provider returned non-JSON body");
  return parsed;
}

ModelResponse OpenAIBackend::complete(const ModelRequest& request) {
  return parse_chat_response(post("/chat/completions", chat_body(request)));
}

std::vector<EmbeddingVector> OpenAIBackend::embed(const std::vector<std::string>& texts) {
  json body = {{"model", config_.embed_model}, {"input", texts}};
  return parse_embedding_response(post("/embeddings", body), texts.size());
}

}  // namespace clio
