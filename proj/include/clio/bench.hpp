#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clio/run_manager.hpp"
#include "clio/telemetry.hpp"

namespace clio {

enum class AnswerType { multiple_choice, exact_match_free_response };

std::string to_string(AnswerType t);
AnswerType answer_type_from_string(std::string_view s);

struct QuestionRecord {
  std::string id;
  std::string question;
  std::string gold_answer;
  std::string category;
  AnswerType answer_type = AnswerType::exact_match_free_response;
};

/// JSON Lines, one question per line; blank lines are skipped. Accepts the
/// HLE field spellings (answer, answerType, raw_subject). Throws
/// Error(parse_error) naming the line, Error(duplicate_id).
std::vector<QuestionRecord> parse_questions(std::istream& in, const std::string& source = "<input>");
std::vector<QuestionRecord> load_questions(const std::filesystem::path& path);

/// Last "Final answer: ..." (or "answer: ...") line, else the whole text.
std::string extract_final_answer(std::string_view text);
/// Trim, case-fold, collapse whitespace, strip trailing punctuation.
std::string normalize_answer(std::string_view text);
/// The option letter a reply commits to ("(b)", "answer is B", "C."), if any.
std::optional<char> extract_choice(std::string_view text);
bool score_answer(std::string_view prediction, std::string_view gold, AnswerType type);

/// c/n in hundredths of a percent, rounded half up. Throws
/// Error(invalid_argument) for n <= 0 or c outside [0, n].
std::int64_t percent_hundredths(std::int64_t correct, std::int64_t total);
/// "22.37%".
std::string format_percent(std::int64_t hundredths);
std::string accuracy_percent(std::int64_t correct, std::int64_t total);

struct Improvement {
  double net = 0.0;       // percentage points, 2 decimals
  double relative = 0.0;  // percent of baseline, 2 decimals
  std::string net_text;       // "13.82"
  std::string relative_text;  // "161.64%"
};

/// Net and relative gain of candidate over baseline (both in percent),
/// rounded half away from zero. Throws Error(zero_baseline).
Improvement improvement_report(double candidate_pct, double baseline_pct);

struct RunOutcome {
  int run_index = 0;
  std::string run_id;
  RunStatus status = RunStatus::completed;
  std::string prediction;  // extracted final answer
  bool correct = false;
  std::optional<std::string> error;
  int call_count = 0;
  std::optional<TraceFeatures> features;
  std::optional<Classification> classification;
  double duration_ms = 0.0;  // kept in memory, never written to reports
};

struct BenchmarkRecord {
  QuestionRecord question;
  std::vector<RunOutcome> runs;

  std::vector<bool> pass_at_1() const;
};

struct BenchOptions {
  RunMode mode = RunMode::single;
  json config = json::object();
  int k = 1;
  /// Runs in flight at once.
  int parallelism = 1;
  /// Grade free-response answers with a model call instead of exact match.
  bool judge = false;
  std::chrono::milliseconds run_timeout = std::chrono::minutes(30);
};

/// Runs every question k times through the manager. Run ids are allocated in
/// question-major order regardless of parallelism. Per-run failures are
/// recorded, not thrown. Throws Error(invalid_argument) for an empty list or
/// k < 1.
std::vector<BenchmarkRecord> run_benchmark(std::span<const QuestionRecord> questions,
                                           const BenchOptions& options, RunManager& manager);

struct AccuracyRow {
  std::string label;  // category, or "run N"
  std::int64_t correct = 0;
  std::int64_t total = 0;

  std::string fraction() const;  // "34/152"
  std::string percent() const;   // "22.37%"
};

struct AccuracyReport {
  std::vector<AccuracyRow> categories;  // sorted by name
  AccuracyRow total;
  std::vector<AccuracyRow> per_run;  // one row per run index
  double mean_percent = 0.0;
  double stddev_percent = 0.0;  // sample standard deviation; 0 when k == 1
};

/// Throws Error(invalid_argument) for an empty record list.
AccuracyReport accuracy_report(std::span<const BenchmarkRecord> records);

/// Full report document (no timing data, so identical inputs give identical
/// bytes).
json bench_report_json(std::span<const BenchmarkRecord> records, const AccuracyReport& report,
                       const BenchOptions& options);
/// category,correct,total,fraction,percent rows plus a TOTAL row.
std::string accuracy_csv(const AccuracyReport& report);
/// features_csv_header() rows, one per run with at least two uncertainty events.
std::string bench_features_csv(std::span<const BenchmarkRecord> records,
                               const EscalationConfig& config = {});

/// Fixed-point text with two decimals, rounded half away from zero.
std::string format_fixed2(double value);

}  // namespace clio
