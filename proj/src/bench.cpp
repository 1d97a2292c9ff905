#include "clio/bench.hpp"

#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "clio/error.hpp"
#include "clio/parsing.hpp"
#include "clio/prompts.hpp"

namespace clio {

std::string to_string(AnswerType t) {
  return t == AnswerType::multiple_choice ? "multiple_choice" : "exact_match_free_response";
}

AnswerType answer_type_from_string(std::string_view s) {
  const auto v = to_lower(trim(s));
  if (v == "multiple_choice" || v == "multiplechoice" || v == "mc" || v == "multiple-choice")
    return AnswerType::multiple_choice;
  if (v == "exact_match_free_response" || v == "exactmatch" || v == "exact_match" || v == "exact" ||
      v == "free_response")
    return AnswerType::exact_match_free_response;
  throw Error(Errc::parse_error, "unknown answer_type '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Loading

namespace {

std::optional<std::string> string_field(const json& obj, std::initializer_list<const char*> keys) {
  for (const char* key : keys) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) continue;
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number()) return it->dump();
    throw std::invalid_argument(std::string("field '") + key + "' must be a string");
  }
  return std::nullopt;
}

}  // namespace

std::vector<QuestionRecord> parse_questions(std::istream& in, const std::string& source) {
  std::vector<QuestionRecord> out;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto where = source + ":" + std::to_string(line_no);
    QuestionRecord q;
    try {
      const auto obj = json::parse(line);
      if (!obj.is_object()) throw std::invalid_argument("record is not a JSON object");
      auto need = [&](std::initializer_list<const char*> keys, const char* name) {
        auto v = string_field(obj, keys);
        if (!v || trim(*v).empty()) throw std::invalid_argument(std::string("missing ") + name);
        return *v;
      };
      q.id = need({"id"}, "id");
      q.question = need({"question"}, "question");
      q.gold_answer = need({"gold_answer", "answer"}, "gold_answer");
      q.category = string_field(obj, {"category", "raw_subject"}).value_or("uncategorized");
      const auto type = string_field(obj, {"answer_type", "answerType"});
      q.answer_type = type ? answer_type_from_string(*type) : AnswerType::exact_match_free_response;
    } catch (const json::exception& e) {
      throw Error(Errc::parse_error, where + ": " + e.what());
    } catch (const Error& e) {
      throw Error(Errc::parse_error, where + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw Error(Errc::parse_error, where + ": " + e.what());
    }
    if (!seen.insert(q.id).second)
      throw Error(Errc::duplicate_id, where + ": duplicate question id '" + q.id + "'");
    out.push_back(std::move(q));
  }
  return out;
}

std::vector<QuestionRecord> load_questions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::parse_error, "cannot open question file " + path.string());
  return parse_questions(in, path.string());
}

// ---------------------------------------------------------------------------
// Scoring

std::string extract_final_answer(std::string_view text) {
  static const std::regex final_re(R"(^\s*\**\s*(?:final\s+answer|answer)\s*\**\s*[:=]\s*(.+?)\s*$)",
                                   std::regex::icase);
  std::istringstream in{std::string(text)};
  std::string line, found;
  std::smatch m;
  while (std::getline(in, line)) {
    if (std::regex_match(line, m, final_re)) found = m[1].str();
  }
  return found.empty() ? trim(text) : trim(found);
}

std::string normalize_answer(std::string_view text) {
  std::string out;
  bool space = false;
  for (char c : trim(text)) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  while (!out.empty() && std::string_view(".,;:!?").find(out.back()) != std::string_view::npos) out.pop_back();
  if (out.size() >= 2 && ((out.front() == '"' && out.back() == '"') || (out.front() == '\'' && out.back() == '\'')))
    out = trim(out.substr(1, out.size() - 2));
  return out;
}

std::optional<char> extract_choice(std::string_view text) {
  const auto norm = normalize_answer(extract_final_answer(text));
  static const std::regex bare(R"(^\(?([a-z])\)?$)");
  static const std::regex phrase(R"((?:answer|option|choice)\s*(?:is|:)?\s*\(?([a-z])\)?(?![a-z]))");
  static const std::regex leading(R"(^\(?([a-z])[).:](?:\s|$))");
  std::smatch m;
  if (std::regex_match(norm, m, bare)) return m[1].str()[0];
  std::optional<char> last;
  for (auto it = std::sregex_iterator(norm.begin(), norm.end(), phrase); it != std::sregex_iterator(); ++it)
    last = (*it)[1].str()[0];
  if (last) return last;
  if (std::regex_search(norm, m, leading)) return m[1].str()[0];
  return std::nullopt;
}

bool score_answer(std::string_view prediction, std::string_view gold, AnswerType type) {
  if (type == AnswerType::multiple_choice) {
    const auto p = extract_choice(prediction);
    const auto g = extract_choice(gold);
    if (p && g) return *p == *g;
  }
  return normalize_answer(extract_final_answer(prediction)) == normalize_answer(gold);
}

// ---------------------------------------------------------------------------
// Arithmetic

std::int64_t percent_hundredths(std::int64_t correct, std::int64_t total) {
  if (total <= 0 || correct < 0 || correct > total)
    throw Error(Errc::invalid_argument,
                "accuracy needs 0 <= correct <= total and total > 0 (got " + std::to_string(correct) + "/" +
                    std::to_string(total) + ")");
  // round(10000 c / n) with halves going up, in integers.
  return (20000 * correct + total) / (2 * total);
}

std::string format_percent(std::int64_t hundredths) {
  const bool negative = hundredths < 0;
  const auto v = negative ? -hundredths : hundredths;
  std::string frac = std::to_string(v % 100);
  if (frac.size() < 2) frac.insert(0, "0");
  return (negative ? "-" : "") + std::to_string(v / 100) + "." + frac + "%";
}

std::string accuracy_percent(std::int64_t correct, std::int64_t total) {
  return format_percent(percent_hundredths(correct, total));
}

namespace {

std::int64_t round_hundredths(double value) {
  const long double scaled = static_cast<long double>(value) * 100.0L;
  const long double whole = std::trunc(scaled);
  const long double frac = std::fabs(scaled - whole);
  // Decimal inputs such as 13.815 are not exact in binary; treat a fraction
  // within 1e-9 of one half as exactly one half.
  if (std::fabs(frac - 0.5L) < 1e-9L) return static_cast<std::int64_t>(whole + (scaled < 0 ? -1 : 1));
  return static_cast<std::int64_t>(std::llround(scaled));
}

}  // namespace

std::string format_fixed2(double value) {
  auto text = format_percent(round_hundredths(value));
  text.pop_back();
  return text;
}

Improvement improvement_report(double candidate_pct, double baseline_pct) {
  if (!std::isfinite(candidate_pct) || !std::isfinite(baseline_pct))
    throw Error(Errc::invalid_argument, "percentages must be finite");
  if (baseline_pct == 0.0) throw Error(Errc::zero_baseline, "relative improvement over a zero baseline");
  Improvement r;
  const double net = candidate_pct - baseline_pct;
  const auto net_h = round_hundredths(net);
  const auto rel_h = round_hundredths(net / baseline_pct * 100.0);
  r.net = static_cast<double>(net_h) / 100.0;
  r.relative = static_cast<double>(rel_h) / 100.0;
  r.net_text = format_fixed2(net);
  r.relative_text = format_percent(rel_h);
  return r;
}

// ---------------------------------------------------------------------------
// Running

std::vector<bool> BenchmarkRecord::pass_at_1() const {
  std::vector<bool> out;
  for (const auto& r : runs) out.push_back(r.correct);
  return out;
}

namespace {

bool judge_answer(Gateway& gateway, const QuestionRecord& q, const std::string& prediction) {
  return gateway.complete_structured(prompts::judge(q.question, prediction, q.gold_answer, 0.0),
                                     [](const ModelResponse& r) {
                                       auto kv = parse_key_values(r.text);
                                       auto v = first_value(kv, "correct");
                                       if (!v) throw Error(Errc::malformed_response, "judge reply has no 'correct:' line");
                                       const auto word = to_lower(trim(*v));
                                       return word.rfind("yes", 0) == 0 || word.rfind("true", 0) == 0;
                                     });
}

RunOutcome collect(RunManager& manager, const QuestionRecord& q, const std::string& run_id, int index,
                   const BenchOptions& options, std::chrono::steady_clock::time_point started) {
  auto record = manager.wait_until_idle(run_id, options.run_timeout);
  if (!is_terminal(record.status)) {
    try {
      manager.steer({run_id, std::nullopt, SteerAction::terminate, std::nullopt});
    } catch (const Error&) {
    }
    record = manager.wait_until_idle(run_id, options.run_timeout);
  }
  RunOutcome out;
  out.run_index = index;
  out.run_id = run_id;
  out.status = record.status;
  out.duration_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  out.error = record.error;
  if (record.status == RunStatus::terminated && !out.error) out.error = "run did not finish in time";

  const auto events = manager.events(run_id);
  for (const auto& e : events)
    if (e.kind == EventKind::model_call && e.payload.value("purpose", std::string{}) != "embed" &&
        e.payload.value("metered", true))
      ++out.call_count;

  if (record.answer) {
    out.prediction = extract_final_answer(*record.answer);
    try {
      out.correct = options.judge && q.answer_type == AnswerType::exact_match_free_response
                        ? judge_answer(manager.gateway(), q, *record.answer)
                        : score_answer(*record.answer, q.gold_answer, q.answer_type);
    } catch (const Error& e) {
      out.error = std::string("judge failed: ") + e.what();
    }
  }

  auto trace = extract_trace(events);
  if (trace.events.size() >= 2) {
    EscalationConfig esc;
    try {
      esc = parse_run_config(options.config).escalation;
    } catch (const Error&) {
    }
    out.features = compute_features(trace, esc.amplitude_eps);
    out.classification = classify_trace(*out.features, esc);
  }
  return out;
}

}  // namespace

std::vector<BenchmarkRecord> run_benchmark(std::span<const QuestionRecord> questions, const BenchOptions& options,
                                           RunManager& manager) {
  if (questions.empty()) throw Error(Errc::invalid_argument, "no questions to run");
  if (options.k < 1) throw Error(Errc::invalid_argument, "k must be >= 1");
  json config = options.config.is_object() ? options.config : json::object();
  // A benchmark has nobody to answer an escalation.
  config["pause_on_escalation"] = false;
  if (config.contains("escalation") && config["escalation"].is_object())
    config["escalation"]["pause_on_escalation"] = false;
  parse_run_config(config);  // fail fast on bad config

  std::vector<BenchmarkRecord> records;
  for (const auto& q : questions) records.push_back({q, std::vector<RunOutcome>(options.k)});

  struct Job {
    std::size_t question;
    int index;
    std::string run_id;
    std::chrono::steady_clock::time_point started;
  };
  std::deque<Job> in_flight;
  auto finish_oldest = [&] {
    auto job = std::move(in_flight.front());
    in_flight.pop_front();
    records[job.question].runs[job.index] =
        collect(manager, questions[job.question], job.run_id, job.index, options, job.started);
  };

  const auto width = static_cast<std::size_t>(std::max(1, options.parallelism));
  for (std::size_t qi = 0; qi < questions.size(); ++qi) {
    for (int i = 0; i < options.k; ++i) {
      if (in_flight.size() >= width) finish_oldest();
      Job job{qi, i, {}, std::chrono::steady_clock::now()};
      try {
        job.run_id = manager.create_run(questions[qi].question, options.mode, config).run_id;
      } catch (const Error& e) {
        auto& slot = records[qi].runs[i];
        slot.run_index = i;
        slot.status = RunStatus::failed;
        slot.error = e.what();
        continue;
      }
      in_flight.push_back(std::move(job));
    }
  }
  while (!in_flight.empty()) finish_oldest();
  return records;
}

// ---------------------------------------------------------------------------
// Reports

std::string AccuracyRow::fraction() const {
  return std::to_string(correct) + "/" + std::to_string(total);
}

std::string AccuracyRow::percent() const {
  return accuracy_percent(correct, total);
}

AccuracyReport accuracy_report(std::span<const BenchmarkRecord> records) {
  if (records.empty()) throw Error(Errc::invalid_argument, "no benchmark records");
  AccuracyReport report;
  report.total.label = "TOTAL";
  std::map<std::string, AccuracyRow> by_category;
  std::map<int, AccuracyRow> by_run;
  for (const auto& rec : records) {
    auto& cat = by_category[rec.question.category];
    cat.label = rec.question.category;
    for (const auto& run : rec.runs) {
      ++cat.total;
      ++report.total.total;
      auto& r = by_run[run.run_index];
      r.label = "run " + std::to_string(run.run_index + 1);
      ++r.total;
      if (run.correct) {
        ++cat.correct;
        ++report.total.correct;
        ++r.correct;
      }
    }
  }
  if (report.total.total == 0) throw Error(Errc::invalid_argument, "benchmark records contain no runs");
  for (auto& [_, row] : by_category) report.categories.push_back(row);
  std::vector<double> pct;
  for (auto& [_, row] : by_run) {
    report.per_run.push_back(row);
    pct.push_back(100.0 * static_cast<double>(row.correct) / static_cast<double>(row.total));
  }
  double sum = 0;
  for (double p : pct) sum += p;
  report.mean_percent = sum / static_cast<double>(pct.size());
  if (pct.size() > 1) {
    double ss = 0;
    for (double p : pct) ss += (p - report.mean_percent) * (p - report.mean_percent);
    report.stddev_percent = std::sqrt(ss / static_cast<double>(pct.size() - 1));
  }
  return report;
}

namespace {

json row_json(const AccuracyRow& r) {
  return json{{"label", r.label},
              {"correct", r.correct},
              {"total", r.total},
              {"fraction", r.fraction()},
              {"percent", r.percent()}};
}

}  // namespace

json bench_report_json(std::span<const BenchmarkRecord> records, const AccuracyReport& report,
                       const BenchOptions& options) {
  json categories = json::array(), runs = json::array(), items = json::array();
  for (const auto& r : report.categories) categories.push_back(row_json(r));
  for (const auto& r : report.per_run) runs.push_back(row_json(r));
  for (const auto& rec : records) {
    json rj = json::array();
    for (const auto& run : rec.runs) {
      rj.push_back({{"run_index", run.run_index},
                    {"run_id", run.run_id},
                    {"status", to_string(run.status)},
                    {"prediction", run.prediction},
                    {"correct", run.correct},
                    {"error", run.error ? json(*run.error) : json(nullptr)},
                    {"call_count", run.call_count},
                    {"features", run.features ? json(*run.features) : json(nullptr)},
                    {"regime", run.classification ? json(to_string(run.classification->regime)) : json(nullptr)},
                    {"escalate", run.classification ? json(run.classification->escalate) : json(nullptr)}});
    }
    items.push_back({{"question_id", rec.question.id},
                     {"category", rec.question.category},
                     {"answer_type", to_string(rec.question.answer_type)},
                     {"gold_answer", rec.question.gold_answer},
                     {"pass_at_1", rec.pass_at_1()},
                     {"runs", rj}});
  }
  return json{{"schema_version", kSchemaVersion},
              {"mode", to_string(options.mode)},
              {"k", options.k},
              {"judge", options.judge},
              {"question_count", records.size()},
              {"config", options.config},
              {"total", row_json(report.total)},
              {"categories", categories},
              {"per_run", runs},
              {"mean_percent", format_fixed2(report.mean_percent)},
              {"stddev_percent", format_fixed2(report.stddev_percent)},
              {"records", items}};
}

std::string accuracy_csv(const AccuracyReport& report) {
  auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
      if (c == '"') out += '"';
      out += c;
    }
    return out + "\"";
  };
  std::string out = "category,correct,total,fraction,percent\n";
  auto line = [&](const AccuracyRow& r) {
    out += quote(r.label) + "," + std::to_string(r.correct) + "," + std::to_string(r.total) + "," + r.fraction() +
           "," + r.percent() + "\n";
  };
  for (const auto& r : report.categories) line(r);
  line(report.total);
  return out;
}

std::string bench_features_csv(std::span<const BenchmarkRecord> records, const EscalationConfig& config) {
  std::string out = features_csv_header() + "\n";
  for (const auto& rec : records)
    for (const auto& run : rec.runs)
      if (run.features)
        out += features_csv_row(run.run_id, run.correct ? Outcome::correct : Outcome::incorrect, *run.features,
                                config) +
               "\n";
  return out;
}

}  // namespace clio
