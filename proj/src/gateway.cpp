#include "clio/gateway.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace clio {

// ---------------------------------------------------------------------------
// model.hpp helpers

double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  const auto n = std::min(a.values.size(), b.values.size());
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a.values[i] * b.values[i];
    na += a.values[i] * a.values[i];
    nb += b.values[i] * b.values[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string canonical_request(const ModelRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) messages.push_back({m.role, m.content});
  json j = {{"messages", std::move(messages)},
            {"temperature", request.temperature},
            {"response_format", request.response_format == ResponseFormat::structured
                                    ? "structured"
                                    : "free_text"}};
  return j.dump();
}

std::string request_key(const ModelRequest& request) {
  static constexpr char hex[] = "0123456789abcdef";
  auto h = fnv1a64(canonical_request(request));
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = hex[h & 0xf];
    h >>= 4;
  }
  return out;
}

void to_json(json& j, const Message& m) {
  j = json{{"role", m.role}, {"content", m.content}};
}

void to_json(json& j, const ModelResponse& r) {
  j = json{{"text", r.text}};
  if (r.tool_invocation)
    j["tool_invocation"] = {{"name", r.tool_invocation->name},
                            {"arguments", r.tool_invocation->arguments}};
}

ModelResponse response_from_json(const json& j) {
  ModelResponse r;
  if (j.is_string()) {
    r.text = j.get<std::string>();
    return r;
  }
  r.text = j.value("text", std::string{});
  if (auto it = j.find("tool_invocation"); it != j.end() && it->is_object()) {
    ToolInvocation call;
    call.name = it->value("name", std::string{});
    call.arguments = it->value("arguments", json::object());
    r.tool_invocation = std::move(call);
  }
  return r;
}

// ---------------------------------------------------------------------------

class Gateway::Slot {
 public:
  explicit Slot(Gateway& g) : g_(g) {
    std::unique_lock lock(g_.slots_mutex_);
    g_.slots_cv_.wait(lock, [&] { return g_.in_flight_ < std::max(1, g_.options_.max_in_flight); });
    ++g_.in_flight_;
  }
  ~Slot() {
    {
      std::lock_guard lock(g_.slots_mutex_);
      --g_.in_flight_;
    }
    g_.slots_cv_.notify_one();
  }
  Slot(const Slot&) = delete;
  Slot& operator=(const Slot&) = delete;

 private:
  Gateway& g_;
};

Gateway::Gateway(std::shared_ptr<ModelBackend> backend, GatewayOptions options)
    : backend_(std::move(backend)), options_(options) {
  if (!backend_) throw Error(Errc::invalid_argument, "gateway needs a backend");
}

template <class Fn>
auto Gateway::with_retries(Fn&& fn) -> decltype(fn()) {
  auto delay = options_.backoff_base;
  for (int attempt = 0;; ++attempt) {
    ++attempts_;
    try {
      Slot slot(*this);
      return fn();
    } catch (const Error& e) {
      if (e.code() != Errc::transport) throw;
      if (attempt >= options_.max_retries)
        throw Error(Errc::provider_unavailable,
                    "provider unavailable after " + std::to_string(attempt + 1) +
                        " attempts: " + e.what());
    }
    if (delay.count() > 0) std::this_thread::sleep_for(delay);
    delay = std::min(options_.backoff_cap,
                     std::chrono::milliseconds(static_cast<std::int64_t>(
                         static_cast<double>(delay.count()) * options_.backoff_factor)));
  }
}

ModelResponse Gateway::complete(const ModelRequest& request, const CallSite& site) {
  if (request.messages.empty()) throw Error(Errc::invalid_argument, "request has no messages");
  if (request.temperature < 0) throw Error(Errc::invalid_argument, "negative temperature");

  if (site.run) {
    site.run->checkpoint(site.channel_id);
    if (site.metered) site.run->charge_call();
  }
  const auto before = attempts_.load();
  auto response = with_retries([&] { return backend_->complete(request); });
  ++calls_;
  if (site.tally) ++*site.tally;

  if (site.run) {
    json payload = {{"purpose", request.purpose},
                    {"temperature", request.temperature},
                    {"response_format", request.response_format == ResponseFormat::structured
                                            ? "structured"
                                            : "free_text"},
                    {"messages", request.messages},
                    {"response", response},
                    {"attempts", attempts_.load() - before}};
    if (!site.metered) payload["metered"] = false;
    if (!request.tools.empty()) {
      json tools = json::array();
      for (const auto& t : request.tools) tools.push_back(t.name);
      payload["tools"] = std::move(tools);
    }
    site.run->emit(site.channel_id, EventKind::model_call, std::move(payload));
  }
  return response;
}

std::vector<EmbeddingVector> Gateway::embed(const std::vector<std::string>& texts,
                                            const CallSite& site) {
  if (texts.empty()) throw Error(Errc::empty_input, "nothing to embed");
  for (const auto& t : texts)
    if (trim(t).empty()) throw Error(Errc::empty_input, "cannot embed blank text");

  if (site.run) site.run->checkpoint(site.channel_id);
  auto vectors = with_retries([&] { return backend_->embed(texts); });
  if (vectors.size() != texts.size())
    throw Error(Errc::malformed_response, "embedder returned " + std::to_string(vectors.size()) +
                                              " vectors for " + std::to_string(texts.size()) +
                                              " inputs");
  for (const auto& v : vectors)
    for (double x : v.values)
      if (!std::isfinite(x)) throw Error(Errc::malformed_response, "non-finite embedding");

  if (site.run)
    site.run->emit(site.channel_id, EventKind::model_call,
                   json{{"purpose", "embed"}, {"inputs", texts.size()}});
  return vectors;
}

}  // namespace clio
