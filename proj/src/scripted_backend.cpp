#include "clio/scripted_backend.hpp"

#include <algorithm>
#include <fstream>

#include "clio/error.hpp"

namespace clio {

ScriptedReply ScriptedReply::text(std::string body) {
  ScriptedReply r;
  r.response.text = std::move(body);
  return r;
}

ScriptedReply ScriptedReply::tool(std::string name, json arguments) {
  ScriptedReply r;
  r.response.tool_invocation = ToolInvocation{std::move(name), std::move(arguments)};
  return r;
}

ScriptedReply ScriptedReply::transport_error() {
  ScriptedReply r;
  r.failure = Failure::transport;
  return r;
}

ScriptedReply reply_from_json(const json& j) {
  ScriptedReply r;
  if (j.is_object()) {
    if (auto err = j.value("error", std::string{}); !err.empty()) {
      r.failure = err == "transport" ? ScriptedReply::Failure::transport
                                     : ScriptedReply::Failure::unavailable;
      return r;
    }
  }
  r.response = response_from_json(j);
  return r;
}

namespace {

ScriptRule rule_from_json(const json& j) {
  ScriptRule rule;
  if (j.contains("purpose")) rule.purpose = j.at("purpose").get<std::string>();
  if (j.contains("channel")) rule.channel = j.at("channel").get<std::string>();
  if (j.contains("channel_prefix")) rule.channel_prefix = j.at("channel_prefix").get<std::string>();
  if (auto it = j.find("contains"); it != j.end()) {
    if (it->is_string()) {
      rule.contains.push_back(it->get<std::string>());
    } else {
      rule.contains = it->get<std::vector<std::string>>();
    }
  }
  if (auto it = j.find("responses"); it != j.end()) {
    for (const auto& r : *it) rule.replies.push_back(reply_from_json(r));
  } else if (auto one = j.find("response"); one != j.end()) {
    rule.replies.push_back(reply_from_json(*one));
  }
  rule.repeat_last = j.value("repeat_last", true);
  if (rule.replies.empty()) throw Error(Errc::parse_error, "script rule has no responses");
  return rule;
}

}  // namespace

ScriptedBackend::ScriptedBackend(std::size_t embedding_dimension)
    : embedder_(embedding_dimension) {}

void ScriptedBackend::add_fixture(const std::string& key, ScriptedReply reply) {
  std::lock_guard lock(mutex_);
  fixtures_[key] = std::move(reply);
}

void ScriptedBackend::add_rule(ScriptRule rule) {
  std::lock_guard lock(mutex_);
  rules_.push_back({std::move(rule), 0});
}

void ScriptedBackend::add_playlist(ScriptedReply reply) {
  std::lock_guard lock(mutex_);
  playlist_.push_back(std::move(reply));
}

void ScriptedBackend::set_default(const std::string& purpose, ScriptedReply reply) {
  std::lock_guard lock(mutex_);
  defaults_[purpose] = std::move(reply);
}

void ScriptedBackend::load_json(const json& doc) {
  if (doc.contains("key") && doc.contains("response")) {
    add_fixture(doc.at("key").get<std::string>(), reply_from_json(doc.at("response")));
    return;
  }
  for (const auto& f : doc.value("fixtures", json::array()))
    add_fixture(f.at("key").get<std::string>(), reply_from_json(f.at("response")));
  for (const auto& r : doc.value("rules", json::array())) add_rule(rule_from_json(r));
  for (const auto& p : doc.value("playlist", json::array())) add_playlist(reply_from_json(p));
  const json defaults = doc.value("defaults", json::object());
  for (const auto& [purpose, reply] : defaults.items())
    set_default(purpose, reply_from_json(reply));
}

void ScriptedBackend::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::parse_error, "cannot open fixture file " + path.string());
  try {
    load_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(Errc::parse_error, path.string() + ": " + e.what());
  }
}

void ScriptedBackend::load_directory(const std::filesystem::path& dir) {
  if (std::filesystem::is_regular_file(dir)) {
    load_file(dir);
    return;
  }
  if (!std::filesystem::is_directory(dir))
    throw Error(Errc::parse_error, "fixture directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) load_file(f);
}

std::optional<ScriptedReply> ScriptedBackend::lookup_locked(const ModelRequest& request) {
  if (auto it = fixtures_.find(request_key(request)); it != fixtures_.end()) return it->second;

  std::string haystack;
  for (const auto& m : request.messages) {
    haystack += m.content;
    haystack += '\n';
  }
  for (auto& state : rules_) {
    const auto& rule = state.rule;
    if (rule.purpose && *rule.purpose != request.purpose) continue;
    if (rule.channel && *rule.channel != request.channel_id) continue;
    if (rule.channel_prefix && !in_scope(request.channel_id, *rule.channel_prefix)) continue;
    const bool all = std::all_of(rule.contains.begin(), rule.contains.end(), [&](const auto& needle) {
      return haystack.find(needle) != std::string::npos;
    });
    if (!all) continue;
    if (state.next >= rule.replies.size()) {
      if (!rule.repeat_last) continue;
      return rule.replies.back();
    }
    return rule.replies[state.next++];
  }
  if (playlist_next_ < playlist_.size()) return playlist_[playlist_next_++];
  if (auto it = defaults_.find(request.purpose); it != defaults_.end()) return it->second;
  if (auto it = defaults_.find("*"); it != defaults_.end()) return it->second;
  return std::nullopt;
}

ModelResponse ScriptedBackend::complete(const ModelRequest& request) {
  std::optional<ScriptedReply> reply;
  {
    std::lock_guard lock(mutex_);
    requests_.push_back(request);
    reply = lookup_locked(request);
  }
  if (!reply)
    throw Error(Errc::provider_unavailable,
                "no scripted response for purpose '" + request.purpose + "' on channel '" +
                    request.channel_id + "' (key " + request_key(request) + ")");
  switch (reply->failure) {
    case ScriptedReply::Failure::transport:
      throw Error(Errc::transport, "scripted transport failure");
    case ScriptedReply::Failure::unavailable:
      throw Error(Errc::provider_unavailable, "scripted provider failure");
    case ScriptedReply::Failure::none:
      break;
  }
  return reply->response;
}

std::vector<EmbeddingVector> ScriptedBackend::embed(const std::vector<std::string>& texts) {
  {
    std::lock_guard lock(mutex_);
    ++embed_calls_;
  }
  return embedder_.embed(texts);
}

std::vector<ModelRequest> ScriptedBackend::requests() const {
  std::lock_guard lock(mutex_);
  return requests_;
}

std::size_t ScriptedBackend::request_count(const std::string& purpose) const {
  std::lock_guard lock(mutex_);
  if (purpose.empty()) return requests_.size();
  return static_cast<std::size_t>(std::count_if(
      requests_.begin(), requests_.end(), [&](const auto& r) { return r.purpose == purpose; }));
}

std::size_t ScriptedBackend::embed_calls() const {
  std::lock_guard lock(mutex_);
  return embed_calls_;
}

void ScriptedBackend::clear_requests() {
  std::lock_guard lock(mutex_);
  requests_.clear();
  embed_calls_ = 0;
}

}  // namespace clio
