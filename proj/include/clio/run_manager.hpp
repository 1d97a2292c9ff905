#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "clio/cognitive_loop.hpp"
#include "clio/gateway.hpp"
#include "clio/graph.hpp"
#include "clio/run_context.hpp"
#include "clio/telemetry.hpp"
#include "clio/types.hpp"

namespace clio {

enum class RunMode { single, more_thinking };
enum class RunStatus { running, awaiting_user, completed, terminated, failed };

std::string to_string(RunMode m);
RunMode run_mode_from_string(std::string_view s);
std::string to_string(RunStatus s);
bool is_terminal(RunStatus s);

/// Everything a run needs besides the question. JSON shape:
///   {"params": {...}, "loop": {...}, "more_thinking": {...},
///    "escalation": {..., "pause_on_escalation": bool}}
/// Channel parameters may also appear at the top level.
struct RunConfig {
  ChannelParams params;
  LoopConfig loop;
  MoreThinkingConfig more_thinking;
  EscalationConfig escalation;
  bool pause_on_escalation = false;
};

/// Parses and validates, collecting every bad field into one ConfigError.
RunConfig parse_run_config(const json& j, const RunConfig& defaults = {});
void to_json(json& j, const RunConfig& c);

struct RunRecord {
  std::string run_id;
  std::string question;
  RunMode mode = RunMode::single;
  json config = json::object();
  RunStatus status = RunStatus::running;
  std::optional<std::string> answer;
  std::optional<std::string> error;
  std::int64_t created_at_ms = 0;
  std::int64_t updated_at_ms = 0;
  std::uint64_t event_count = 0;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

void to_json(json& j, const RunRecord& r);

/// Applies one event to a record. A record is the left fold of its log.
void apply_event(RunRecord& record, const RunEvent& event);
RunRecord fold_record(std::span<const RunEvent> events);

enum class SteerAction { interject, terminate, resume };

std::string to_string(SteerAction a);
SteerAction steer_action_from_string(std::string_view s);

struct SteeringCommand {
  std::string run_id;
  std::optional<std::string> channel_id;
  SteerAction action = SteerAction::interject;
  std::optional<std::string> message;
};

SteeringCommand steering_command_from_json(const std::string& run_id, const json& j);

enum class SnapshotView { record, graph, trace, features };
SnapshotView snapshot_view_from_string(std::string_view s);

/// Owns every run: creation, asynchronous execution, steering, snapshots and
/// persistence (one JSON-lines log per run plus an index file). With an empty
/// data directory nothing is written to disk.
class RunManager {
 public:
  struct Options {
    std::filesystem::path data_dir;
    RunConfig defaults;
    GatewayOptions gateway;
  };

  RunManager(std::shared_ptr<ModelBackend> backend, Options options);
  ~RunManager();

  RunManager(const RunManager&) = delete;
  RunManager& operator=(const RunManager&) = delete;

  /// Validates, logs a `created` event and starts execution in the
  /// background. Throws ConfigError / Error(empty_question).
  RunRecord create_run(const std::string& question, RunMode mode, const json& config);

  std::vector<RunRecord> list_runs() const;
  RunRecord get_run(const std::string& run_id) const;

  std::vector<RunEvent> events(const std::string& run_id, std::uint64_t from_seq = 0) const;
  /// Blocks until an event with seq >= from_seq exists or the timeout passes.
  bool wait_for_events(const std::string& run_id, std::uint64_t from_seq,
                       std::chrono::milliseconds timeout) const;

  /// Appends the steering event and returns {schema_version, seq, action,
  /// channel_id, status}. Throws Error(unknown_run / unknown_channel /
  /// illegal_state / invalid_argument).
  json steer(const SteeringCommand& command);

  /// Throws Error(unknown_run) or Error(view_unavailable).
  json snapshot(const std::string& run_id, SnapshotView view) const;

  /// Waits until the run's executor has stopped (terminal status or paused).
  RunRecord wait_until_idle(const std::string& run_id,
                            std::chrono::milliseconds timeout = std::chrono::seconds(30)) const;

  std::shared_ptr<RunContext> context(const std::string& run_id) const;
  Gateway& gateway() noexcept { return gateway_; }

 private:
  struct Entry;

  std::shared_ptr<Entry> find(const std::string& run_id) const;
  std::shared_ptr<Entry> open_entry(const std::string& run_id, const std::string& question, RunMode mode,
                                    const RunConfig& config, std::vector<RunEvent> history);
  void start(const std::shared_ptr<Entry>& entry, int epoch);
  void execute(const std::shared_ptr<Entry>& entry, int epoch);
  void load();
  void write_index_locked() const;
  std::filesystem::path log_path(const std::string& run_id) const;

  std::shared_ptr<ModelBackend> backend_;
  Options options_;
  Gateway gateway_;

  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Entry>> runs_;
  std::uint64_t next_id_ = 1;
};

}  // namespace clio
