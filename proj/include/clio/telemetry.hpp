#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clio/gateway.hpp"
#include "clio/run_context.hpp"
#include "clio/types.hpp"

namespace clio {

struct UncertaintyEvent {
  std::string id;
  std::int64_t timestamp = 0;
  double level = 0.0;
  std::string description;
  std::vector<std::string> addressed_prior_ids;
  std::string channel_id;

  friend bool operator==(const UncertaintyEvent&, const UncertaintyEvent&) = default;
};

enum class Outcome { correct, incorrect, unknown };

std::string to_string(Outcome o);
Outcome outcome_from_string(std::string_view s);

struct UncertaintyTrace {
  std::string run_id;
  std::vector<UncertaintyEvent> events;
  std::optional<Outcome> outcome;

  std::vector<double> levels() const;
};

struct TraceFeatures {
  double initial_uncertainty = 0.0;
  double uncertainty_range = 0.0;
  double mean_level = 0.0;
  double slope = 0.0;
  /// +-infinity when the fit is perfect and the slope is nonzero.
  double slope_t_stat = 0.0;
  int oscillation_count = 0;
  double addressing_ratio = 1.0;
  int n_events = 0;

  friend bool operator==(const TraceFeatures&, const TraceFeatures&) = default;
};

enum class Regime { low_negative, addressed_negative, low_positive, high_positive };

std::string to_string(Regime r);

struct EscalationConfig {
  double high_mean_threshold = 0.5;
  int oscillation_threshold = 3;
  double amplitude_eps = 0.05;
};

struct Classification {
  Regime regime = Regime::low_negative;
  bool escalate = false;
};

struct SlopeStats {
  double slope = 0.0;
  double t_stat = 0.0;
};

/// Native uncertainty events of one run, ordered by (timestamp, seq).
UncertaintyTrace extract_trace(std::span<const RunEvent> events);

/// Model-based extraction from a plain reasoning transcript. Event ids are
/// "u0", "u1", ... in transcript order and timestamps are the indices.
UncertaintyTrace extract_trace_from_transcript(const std::string& run_id,
                                               const std::string& transcript, Gateway& gateway,
                                               double temperature = 0.0);

/// Native events when present, otherwise extraction over the run's sampled
/// and synthesized thoughts.
UncertaintyTrace extract_trace(std::span<const RunEvent> events, Gateway& gateway);

/// OLS of level on event index. Throws Error(too_few_events) below 2 events.
SlopeStats slope_stats(const UncertaintyTrace& trace);
SlopeStats slope_stats(std::span<const double> levels);

int oscillation_count(std::span<const double> levels, double amplitude_eps);
int oscillation_count(const UncertaintyTrace& trace, double amplitude_eps);
double addressing_ratio(const UncertaintyTrace& trace);

TraceFeatures compute_features(const UncertaintyTrace& trace, double amplitude_eps = 0.05);

Classification classify_trace(const TraceFeatures& features, const EscalationConfig& config = {});

struct GroupComparison {
  double p_value = 1.0;
  double effect_size = 0.0;
  double t_stat = 0.0;
  double degrees_of_freedom = 0.0;
  double mean_correct = 0.0;
  double mean_incorrect = 0.0;
};

/// Welch t-test and Cohen's d = (mean_incorrect - mean_correct) / pooled sd.
/// Throws Error(too_few_samples) when either group has fewer than 2 entries
/// and Error(invalid_argument) for unknown features or non-finite values.
GroupComparison compare_groups(std::span<const TraceFeatures> correct,
                               std::span<const TraceFeatures> incorrect,
                               const std::string& feature);
GroupComparison compare_samples(std::span<const double> correct, std::span<const double> incorrect);

double feature_value(const TraceFeatures& f, const std::string& name);
const std::vector<std::string>& feature_names();

/// Hook for RunContextOptions::escalation_check: recomputes features over the
/// run's native trace and returns the escalation payload when flagged.
std::function<std::optional<json>(std::span<const RunEvent>)> make_escalation_check(
    EscalationConfig config = {});

void to_json(json& j, const UncertaintyEvent& e);
void from_json(const json& j, UncertaintyEvent& e);
void to_json(json& j, const UncertaintyTrace& t);
void from_json(const json& j, UncertaintyTrace& t);
/// slope_t_stat infinities are written as the strings "inf" / "-inf".
void to_json(json& j, const TraceFeatures& f);
void from_json(const json& j, TraceFeatures& f);

std::string features_csv_header();
std::string features_csv_row(const std::string& run_id, const std::optional<Outcome>& outcome,
                             const TraceFeatures& f, const EscalationConfig& config = {});

}  // namespace clio
