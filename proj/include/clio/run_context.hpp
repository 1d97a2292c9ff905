#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clio/types.hpp"

namespace clio {

/// An uncertainty raised by some channel, as tracked for prompt context.
struct OpenUncertainty {
  std::string id;
  std::string channel_id;
  std::string description;
  double level = 0.0;
  bool addressed = false;
};

struct RunContextOptions {
  int call_budget = 500;
  /// Given every uncertainty event so far, returns a payload when the trace
  /// currently calls for escalation.
  std::function<std::optional<json>(std::span<const RunEvent>)> escalation_check;
  bool pause_on_escalation = false;
};

/// Per-run shared state: the totally ordered event log, the steering mailbox
/// and the model-call budget. Every mutation goes through an appended event,
/// so a context rebuilt from a log reproduces the same steering state.
///
/// Thread-safe. Channels call checkpoint() between model calls.
class RunContext {
 public:
  using Observer = std::function<void(const RunEvent&)>;

  explicit RunContext(std::string run_id, RunContextOptions options = {},
                      std::vector<RunEvent> history = {});

  RunContext(const RunContext&) = delete;
  RunContext& operator=(const RunContext&) = delete;

  const std::string& run_id() const noexcept { return run_id_; }

  /// Called under the log lock for every append, in seq order.
  void add_observer(Observer observer);

  /// Appends an event. Non-control events whose channel scope (or the whole
  /// run) has been terminated are rejected with Error(cancelled).
  RunEvent emit(const std::string& channel_id, EventKind kind, json payload = json::object());

  /// Blocks while the run is paused; throws Error(cancelled) once the scope
  /// of `channel_id` is terminated.
  void checkpoint(const std::string& channel_id);

  /// Reserves one model call against the budget; throws Error(budget_exceeded).
  void charge_call();
  int calls_made() const noexcept { return calls_.load(); }
  int call_budget() const noexcept { return options_.call_budget; }

  // Steering. Each appends exactly one control event and returns it.
  RunEvent interject(const std::optional<std::string>& channel_id, const std::string& message);
  RunEvent terminate(const std::optional<std::string>& channel_id);
  RunEvent resume(const std::optional<std::string>& channel_id,
                  const std::optional<std::string>& message);

  bool terminated(const std::string& channel_id) const;
  bool run_terminated() const;
  bool paused() const;

  /// Human guidance visible to a channel: run-wide messages plus those scoped
  /// to the channel or any of its ancestors, in log order.
  std::vector<std::string> guidance_for(const std::string& channel_id) const;

  /// Unaddressed uncertainties raised on the channel's lineage. A synthesis
  /// channel ("x.syn") also sees everything raised below its parent.
  std::vector<OpenUncertainty> open_uncertainties(const std::string& channel_id) const;
  std::string next_uncertainty_id();
  bool has_uncertainty(const std::string& id) const;

  /// True once a spawn event for this channel id has been logged.
  bool has_channel(const std::string& channel_id) const;

  std::vector<RunEvent> events(std::uint64_t from_seq = 0) const;
  std::uint64_t next_seq() const;

  /// Waits until an event with seq >= from_seq exists, the predicate `done`
  /// holds, or the timeout elapses. Returns true when new events are ready.
  bool wait_for_events(std::uint64_t from_seq, std::chrono::milliseconds timeout) const;
  /// Wakes any waiter (used when run status changes without a new event).
  void notify_all() const;

  /// Stops the executing channels without logging anything (process
  /// shutdown). checkpoint() and emit() throw Error(cancelled) afterwards.
  void abort();
  bool aborted() const;

  std::int64_t now() const;

 private:
  RunEvent append_locked(const std::string& channel_id, EventKind kind, json payload);
  void apply_locked(const RunEvent& event);
  bool terminated_locked(const std::string& channel_id) const;
  void evaluate_escalation_locked();

  std::string run_id_;
  RunContextOptions options_;

  mutable std::mutex mutex_;
  mutable std::condition_variable changed_;
  std::vector<RunEvent> log_;
  std::vector<Observer> observers_;

  bool run_terminated_ = false;
  std::vector<std::string> terminated_scopes_;
  bool paused_ = false;
  bool escalated_ = false;
  bool aborted_ = false;
  struct Guidance {
    std::string scope;
    std::string message;
  };
  std::vector<Guidance> guidance_;
  std::vector<OpenUncertainty> uncertainties_;
  std::vector<std::string> channels_;
  std::size_t uncertainty_counter_ = 0;

  std::atomic<int> calls_{0};
  std::chrono::steady_clock::time_point started_;
  std::int64_t clock_offset_ = 0;
};

}  // namespace clio
