#pragma once

#include <atomic>
#include <span>
#include <string>
#include <vector>

#include "clio/gateway.hpp"
#include "clio/run_context.hpp"
#include "clio/types.hpp"

namespace clio {

/// Engine-level knobs that are not per-channel strategy.
struct LoopConfig {
  double child_temperature = 1.0;
  /// Temperature for assessment calls (confidence, coverage, completion,
  /// self-optimization).
  double eval_temperature = 0.0;
  int call_budget = 500;
  int max_parallel_channels = 4;
  std::size_t parent_summary_chars = 1200;
};

/// Throws ConfigError on out-of-range fields.
void validate(const LoopConfig& config);
void to_json(json& j, const LoopConfig& c);
/// Partial merge: keys absent from `block` keep their value in `base`.
LoopConfig merge_loop_config(LoopConfig base, const json& block);

struct CompletionStatus {
  bool terminal = false;
  std::string rationale;
};

struct RaisedUncertainty {
  double level = 0.0;
  std::string description;
};

struct ConfidenceReading {
  double confidence = 0.0;
  std::vector<RaisedUncertainty> uncertainties;
  std::vector<std::string> addressed;
};

// Reply parsers. Each throws Error(malformed_response).
ConfidenceReading parse_confidence(const ModelResponse& response);
CoverageChecklist parse_checklist(const ModelResponse& response);
/// Applies a strategy proposal to `current`. b, D and tau are clamped so they
/// never exceed their current values; temperature is clamped to [0, 2].
ChannelParams apply_param_proposal(const ChannelParams& current, const ModelResponse& response);

/// Final outcome of a top-level channel run.
struct ChannelRun {
  SemanticState answer;
  ChannelResult result;
  std::vector<RunEvent> events;
  bool budget_exhausted = false;
};

/// Worst-case model calls for one run_channel() with branching b and depth D,
/// assuming well-formed replies (no re-asks).
std::int64_t max_model_calls(int b, int D);
/// Upper bound on states spawned by sample_next in one run.
std::int64_t max_spawned_states(int b, int D);

/// Recursive, confidence-gated exploration.
///
/// For a state s at depth d the engine
///   1. computes coverage (registering the completion function once coverage
///      reaches the channel's threshold), asks for completion only when
///      registered, then assesses confidence; terminal or confident states
///      return {s};
///   2. at d >= D draws up to b flat samples one at a time and returns the
///      first terminal-or-confident one, or nothing;
///   3. otherwise spawns b children with fresh contexts, recurses on them
///      concurrently and synthesizes their union.
///
/// Channel ids follow the lineage: root "c0", children "c0.1".."c0.b", flat
/// samples "c0.f1".., synthesis "c0.syn". Sibling contexts never include each
/// other's thoughts.
class CognitiveLoop {
 public:
  explicit CognitiveLoop(Gateway& gateway, LoopConfig config = {});

  double assess_confidence(SemanticState& state, RunContext& run, int* tally = nullptr);
  double compute_coverage(SemanticState& state, RunContext& run, int* tally = nullptr);
  CompletionStatus check_completion(const SemanticState& state, RunContext& run,
                                    int* tally = nullptr);
  /// Spawns n children of `state`. When `flat`, ids are "<id>.f<k>" starting
  /// at k = first_index, otherwise "<id>.<k>".
  std::vector<SemanticState> sample_next(const SemanticState& state, int n, RunContext& run,
                                         int* tally = nullptr, bool flat = false,
                                         int first_index = 1);
  ChannelParams self_optimize(const SemanticState& state, std::span<const std::string> unresolved,
                              RunContext& run, int* tally = nullptr,
                              const std::string& child_id = {}, int child_index = 1,
                              int child_count = 1);
  SemanticState synthesize(std::span<const SemanticState> results, const SemanticState& parent,
                           RunContext& run, int* tally = nullptr);

  ChannelResult clio(SemanticState state, int depth, RunContext& run);

  /// init_state + clio + final synthesis. Logs an answer event when
  /// `emit_answer`. Throws Error(cancelled) if the run is terminated.
  ChannelRun run_channel(const std::string& question, const ChannelParams& params,
                         RunContext& run, const std::string& root_id = "c0",
                         bool emit_answer = true);

  const LoopConfig& config() const noexcept { return config_; }
  Gateway& gateway() noexcept { return gateway_; }

 private:
  bool stops(SemanticState& state, RunContext& run, int& tally);
  template <class Fn>
  void fork_join(std::size_t n, Fn&& fn, std::vector<std::exception_ptr>& errors);

  Gateway& gateway_;
  LoopConfig config_;
  std::atomic<int> active_workers_{0};
};

}  // namespace clio
