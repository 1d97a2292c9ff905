#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "clio/embedder.hpp"
#include "clio/model.hpp"

namespace clio {

/// A canned reply. `failure` simulates provider trouble instead of replying.
struct ScriptedReply {
  enum class Failure { none, transport, unavailable };

  ModelResponse response;
  Failure failure = Failure::none;

  static ScriptedReply text(std::string body);
  static ScriptedReply tool(std::string name, json arguments = json::object());
  static ScriptedReply transport_error();
};

/// Matches requests by metadata and content. Replies are handed out in order;
/// when exhausted the last one repeats, unless `repeat_last` is false, in
/// which case the rule stops matching.
struct ScriptRule {
  std::optional<std::string> purpose;
  std::optional<std::string> channel;         // exact channel id
  std::optional<std::string> channel_prefix;  // channel id lineage
  std::vector<std::string> contains;          // all must occur in the messages
  std::vector<ScriptedReply> replies;
  bool repeat_last = true;
};

/// Deterministic offline provider. Lookup order for a request:
///   1. keyed fixture (canonical request hash),
///   2. first matching rule, in insertion order,
///   3. ordered playlist,
///   4. default for the request purpose, then the "*" default.
/// Every request is recorded for inspection. Embeddings use HashEmbedder.
class ScriptedBackend : public ModelBackend {
 public:
  explicit ScriptedBackend(std::size_t embedding_dimension = 64);

  void add_fixture(const std::string& key, ScriptedReply reply);
  void add_rule(ScriptRule rule);
  void add_playlist(ScriptedReply reply);
  void set_default(const std::string& purpose, ScriptedReply reply);

  /// Loads a script file ({fixtures, rules, playlist, defaults}) or a single
  /// keyed fixture file ({key, response}).
  void load_file(const std::filesystem::path& path);
  /// Loads every *.json in the directory, in file-name order.
  void load_directory(const std::filesystem::path& dir);
  void load_json(const json& doc);

  ModelResponse complete(const ModelRequest& request) override;
  std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override;
  std::string name() const override { return "scripted"; }

  std::vector<ModelRequest> requests() const;
  std::size_t request_count(const std::string& purpose = "") const;
  std::size_t embed_calls() const;
  void clear_requests();

 private:
  std::optional<ScriptedReply> lookup_locked(const ModelRequest& request);

  mutable std::mutex mutex_;
  std::map<std::string, ScriptedReply> fixtures_;
  struct RuleState {
    ScriptRule rule;
    std::size_t next = 0;
  };
  std::vector<RuleState> rules_;
  std::vector<ScriptedReply> playlist_;
  std::size_t playlist_next_ = 0;
  std::map<std::string, ScriptedReply> defaults_;
  std::vector<ModelRequest> requests_;
  std::size_t embed_calls_ = 0;
  HashEmbedder embedder_;
};

ScriptedReply reply_from_json(const json& j);

}  // namespace clio
