#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "clio/cognitive_loop.hpp"
#include "clio/gateway.hpp"
#include "clio/model.hpp"
#include "clio/run_context.hpp"
#include "clio/scripted_backend.hpp"

namespace clio::test {

/// Unique scratch directory, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

/// Backend whose replies come from a callback.
class FunctionBackend : public ModelBackend {
 public:
  using Fn = std::function<ModelResponse(const ModelRequest&)>;

  explicit FunctionBackend(Fn fn) : fn_(std::move(fn)) {}

  ModelResponse complete(const ModelRequest& request) override;
  std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override;
  std::string name() const override { return "function"; }

  std::vector<ModelRequest> requests() const;

 private:
  Fn fn_;
  mutable std::mutex mutex_;
  std::vector<ModelRequest> requests_;
};

ModelResponse text(std::string body);
ModelResponse completion_tool_call();

/// Per-channel behaviour for loop fixtures. Channels not listed use the
/// defaults: partial coverage (completion never registered) and
/// `default_confidence`.
struct LoopScript {
  std::map<std::string, double> confidence;
  /// Channels whose checklist is fully addressed and which invoke completion.
  std::set<std::string> complete;
  double default_confidence = 0.3;
  std::string answer = "Final answer: B";
};

std::shared_ptr<ScriptedBackend> loop_backend(const LoopScript& script);

/// "kind:channel" per event, model calls as "call:purpose:channel".
std::vector<std::string> compact(const std::vector<RunEvent>& events, bool with_uncertainty = true);

int metered_calls(const std::vector<RunEvent>& events);

/// Small parameter set for quick loop runs.
ChannelParams params(int b, int D, double tau = 0.85);

/// Waits up to `timeout` for `pred`.
bool eventually(const std::function<bool()>& pred,
                std::chrono::milliseconds timeout = std::chrono::seconds(10));

}  // namespace clio::test
