#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace clio {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Per-channel strategy knobs. persona/focus/temperature are what a channel
/// may rewrite for its children; b, D and tau may only shrink.
struct ChannelParams {
  std::string persona;
  std::string focus;
  double temperature = 0.7;
  int branching_factor_b = 3;
  int max_depth_D = 2;
  double confidence_threshold_tau = 0.85;
  double coverage_threshold = 0.8;

  friend bool operator==(const ChannelParams&, const ChannelParams&) = default;
};

/// Throws ConfigError naming every field outside its legal range.
void validate(const ChannelParams& params);

struct ChecklistItem {
  std::string description;
  bool addressed = false;

  friend bool operator==(const ChecklistItem&, const ChecklistItem&) = default;
};

struct CoverageChecklist {
  std::vector<ChecklistItem> items;
  int generated_at_depth = 0;

  /// addressed / total; 0 for an empty list.
  double coverage() const noexcept;
  std::size_t addressed() const noexcept;

  friend bool operator==(const CoverageChecklist&, const CoverageChecklist&) = default;
};

/// One node of thought.
struct SemanticState {
  std::string id;
  std::string question;
  std::string thought;
  ChannelParams params;
  int depth_d = 0;
  std::optional<double> confidence_c;
  std::optional<double> coverage;
  bool completion_registered = false;
  std::optional<std::string> parent_id;
  std::int64_t created_at = 0;
  std::optional<CoverageChecklist> checklist;
  std::vector<std::string> annotations;

  friend bool operator==(const SemanticState&, const SemanticState&) = default;
};

struct ChannelResult {
  std::vector<SemanticState> states;
  std::optional<SemanticState> synthesized;
  int call_count = 0;
  bool budget_exhausted = false;
  /// Every state produced in the subtree, parent before children, children in
  /// spawn-index order. Independent of scheduling.
  std::vector<SemanticState> visited;
};

enum class EventKind {
  created,
  spawn,
  sample,
  model_call,
  confidence,
  coverage,
  completion,
  uncertainty,
  optimize,
  synthesis,
  graph,
  interjection,
  terminate,
  resume,
  escalation,
  answer,
  failure,
};

std::string_view to_string(EventKind kind) noexcept;
EventKind event_kind_from_string(std::string_view name);

/// Steering and lifecycle kinds bypass scope-termination checks on append.
bool is_control_event(EventKind kind) noexcept;

struct RunEvent {
  std::uint64_t seq = 0;
  std::string run_id;
  std::string channel_id;
  EventKind kind = EventKind::created;
  json payload = json::object();
  std::int64_t timestamp = 0;     // monotonic microseconds within the run
  std::int64_t wall_time_ms = 0;  // display only

  friend bool operator==(const RunEvent&, const RunEvent&) = default;
};

/// Equality over everything except the two clocks.
bool same_content(const RunEvent& a, const RunEvent& b);

// JSON (ADL hooks for nlohmann).
void to_json(json& j, const ChannelParams& p);
void from_json(const json& j, ChannelParams& p);
void to_json(json& j, const ChecklistItem& c);
void from_json(const json& j, ChecklistItem& c);
void to_json(json& j, const CoverageChecklist& c);
void from_json(const json& j, CoverageChecklist& c);
void to_json(json& j, const SemanticState& s);
void from_json(const json& j, SemanticState& s);
void to_json(json& j, const RunEvent& e);
void from_json(const json& j, RunEvent& e);

/// Merges a partial loop-config block (short aliases b/D/tau accepted) onto
/// `base`. Unknown keys are ignored.
ChannelParams merge_params(ChannelParams base, const json& block);

/// The initial-state mapping: renders question, persona and focus into the
/// root thought. Throws Error(empty_question) on blank input.
SemanticState init_state(std::string_view question, const ChannelParams& params,
                         std::string id = "c0", std::int64_t created_at = 0);

/// True when `channel` equals `scope` or lies below it in the id lineage
/// ("c0.2" is below "c0"; "c0.2.syn" is below "c0.2").
bool in_scope(std::string_view channel, std::string_view scope) noexcept;

std::string trim(std::string_view text);
std::string to_lower(std::string_view text);

}  // namespace clio
