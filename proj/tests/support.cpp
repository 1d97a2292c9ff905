#include "support.hpp"

#include <sstream>
#include <thread>

#include "clio/embedder.hpp"
#include "clio/error.hpp"

namespace clio::test {

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  std::random_device rd;
  path_ = std::filesystem::temp_directory_path() /
          ("clio-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

ModelResponse FunctionBackend::complete(const ModelRequest& request) {
  {
    std::lock_guard lock(mutex_);
    requests_.push_back(request);
  }
  return fn_(request);
}

std::vector<EmbeddingVector> FunctionBackend::embed(const std::vector<std::string>& texts) {
  return HashEmbedder(32).embed(texts);
}

std::vector<ModelRequest> FunctionBackend::requests() const {
  std::lock_guard lock(mutex_);
  return requests_;
}

ModelResponse text(std::string body) {
  ModelResponse r;
  r.text = std::move(body);
  return r;
}

ModelResponse completion_tool_call() {
  ModelResponse r;
  r.tool_invocation = ToolInvocation{"complete_thought_channel", json{{"rationale", "done"}}};
  return r;
}

std::shared_ptr<ScriptedBackend> loop_backend(const LoopScript& script) {
  auto backend = std::make_shared<ScriptedBackend>(32);
  auto conf = [](double c) {
    std::ostringstream out;
    out << "confidence: " << c;
    return out.str();
  };
  for (const auto& ch : script.complete) {
    ScriptRule cov;
    cov.purpose = "coverage";
    cov.channel = ch;
    cov.replies = {ScriptedReply::text("- [x] mechanism\n- [x] evidence\n- [x] alternatives")};
    backend->add_rule(cov);
    ScriptRule done;
    done.purpose = "completion";
    done.channel = ch;
    done.replies = {ScriptedReply::tool("complete_thought_channel", json{{"rationale", "covered"}})};
    backend->add_rule(done);
  }
  for (const auto& [ch, c] : script.confidence) {
    ScriptRule rule;
    rule.purpose = "confidence";
    rule.channel = ch;
    rule.replies = {ScriptedReply::text(conf(c))};
    backend->add_rule(rule);
  }
  backend->set_default("coverage", ScriptedReply::text("- [x] mechanism\n- [ ] evidence\n- [ ] alternatives"));
  backend->set_default("completion", ScriptedReply::text("Not finished yet."));
  backend->set_default("confidence", ScriptedReply::text(conf(script.default_confidence)));
  backend->set_default("optimize", ScriptedReply::text("focus: the open question"));
  backend->set_default("sample", ScriptedReply::text("A refined hypothesis about the mechanism."));
  backend->set_default("synthesize", ScriptedReply::text("Weighing the findings.\n" + script.answer));
  return backend;
}

std::vector<std::string> compact(const std::vector<RunEvent>& events, bool with_uncertainty) {
  std::vector<std::string> out;
  for (const auto& e : events) {
    if (!with_uncertainty && e.kind == EventKind::uncertainty) continue;
    if (e.kind == EventKind::model_call) {
      out.push_back("call:" + e.payload.value("purpose", std::string{}) + ":" + e.channel_id);
    } else {
      out.push_back(std::string(to_string(e.kind)) + ":" + e.channel_id);
    }
  }
  return out;
}

int metered_calls(const std::vector<RunEvent>& events) {
  int n = 0;
  for (const auto& e : events)
    if (e.kind == EventKind::model_call && e.payload.value("purpose", std::string{}) != "embed" &&
        e.payload.value("metered", true))
      ++n;
  return n;
}

ChannelParams params(int b, int D, double tau) {
  ChannelParams p;
  p.branching_factor_b = b;
  p.max_depth_D = D;
  p.confidence_threshold_tau = tau;
  return p;
}

bool eventually(const std::function<bool()>& pred, std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (pred()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  return pred();
}

}  // namespace clio::test
