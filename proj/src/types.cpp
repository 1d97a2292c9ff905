#include "clio/types.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <utility>

#include "clio/error.hpp"

namespace clio {

namespace {

constexpr std::array<std::pair<EventKind, std::string_view>, 17> kEventNames{{
    {EventKind::created, "created"},
    {EventKind::spawn, "spawn"},
    {EventKind::sample, "sample"},
    {EventKind::model_call, "model_call"},
    {EventKind::confidence, "confidence"},
    {EventKind::coverage, "coverage"},
    {EventKind::completion, "completion"},
    {EventKind::uncertainty, "uncertainty"},
    {EventKind::optimize, "optimize"},
    {EventKind::synthesis, "synthesis"},
    {EventKind::graph, "graph"},
    {EventKind::interjection, "interjection"},
    {EventKind::terminate, "terminate"},
    {EventKind::resume, "resume"},
    {EventKind::escalation, "escalation"},
    {EventKind::answer, "answer"},
    {EventKind::failure, "failure"},
}};

template <class T>
std::optional<T> optional_field(const json& j, const char* key) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) return it->get<T>();
  return std::nullopt;
}

}  // namespace

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::empty_question: return "EmptyQuestion";
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::invalid_config: return "InvalidConfig";
    case Errc::provider_unavailable: return "ProviderUnavailable";
    case Errc::transport: return "TransportError";
    case Errc::malformed_response: return "MalformedResponse";
    case Errc::empty_input: return "EmptyInput";
    case Errc::budget_exceeded: return "BudgetExceeded";
    case Errc::cancelled: return "Cancelled";
    case Errc::empty_graph: return "EmptyGraph";
    case Errc::too_few_events: return "TooFewEvents";
    case Errc::too_few_samples: return "TooFewSamples";
    case Errc::unknown_run: return "UnknownRun";
    case Errc::unknown_channel: return "UnknownChannel";
    case Errc::illegal_state: return "IllegalState";
    case Errc::view_unavailable: return "ViewUnavailable";
    case Errc::parse_error: return "ParseError";
    case Errc::duplicate_id: return "DuplicateId";
    case Errc::zero_baseline: return "ZeroBaseline";
  }
  return "Unknown";
}

ConfigError::ConfigError(std::vector<Field> fields)
    : Error(Errc::invalid_config,
            [&] {
              std::string msg = "invalid config:";
              for (const auto& f : fields) msg += " " + f.name + " (" + f.message + ");";
              return msg;
            }()),
      fields_(std::move(fields)) {}

void validate(const ChannelParams& p) {
  std::vector<ConfigError::Field> bad;
  if (!(p.temperature >= 0.0 && p.temperature <= 2.0))
    bad.push_back({"temperature", "must lie in [0, 2]"});
  if (p.branching_factor_b < 1) bad.push_back({"branching_factor_b", "must be >= 1"});
  if (p.max_depth_D < 0) bad.push_back({"max_depth_D", "must be >= 0"});
  if (!(p.confidence_threshold_tau >= 0.0 && p.confidence_threshold_tau <= 1.0))
    bad.push_back({"confidence_threshold_tau", "must lie in [0, 1]"});
  if (!(p.coverage_threshold >= 0.0 && p.coverage_threshold <= 1.0))
    bad.push_back({"coverage_threshold", "must lie in [0, 1]"});
  if (!bad.empty()) throw ConfigError(std::move(bad));
}

double CoverageChecklist::coverage() const noexcept {
  if (items.empty()) return 0.0;
  return static_cast<double>(addressed()) / static_cast<double>(items.size());
}

std::size_t CoverageChecklist::addressed() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [](const auto& i) { return i.addressed; }));
}

std::string_view to_string(EventKind kind) noexcept {
  for (const auto& [k, name] : kEventNames)
    if (k == kind) return name;
  return "unknown";
}

EventKind event_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kEventNames)
    if (n == name) return k;
  throw Error(Errc::parse_error, "unknown event kind: " + std::string(name));
}

bool is_control_event(EventKind kind) noexcept {
  switch (kind) {
    case EventKind::created:
    case EventKind::interjection:
    case EventKind::terminate:
    case EventKind::resume:
    case EventKind::escalation:
      return true;
    default:
      return false;
  }
}

bool same_content(const RunEvent& a, const RunEvent& b) {
  return a.seq == b.seq && a.run_id == b.run_id && a.channel_id == b.channel_id &&
         a.kind == b.kind && a.payload == b.payload;
}

void to_json(json& j, const ChannelParams& p) {
  j = json{{"persona", p.persona},
           {"focus", p.focus},
           {"temperature", p.temperature},
           {"branching_factor_b", p.branching_factor_b},
           {"max_depth_D", p.max_depth_D},
           {"confidence_threshold_tau", p.confidence_threshold_tau},
           {"coverage_threshold", p.coverage_threshold}};
}

void from_json(const json& j, ChannelParams& p) {
  p = merge_params(ChannelParams{}, j);
}

ChannelParams merge_params(ChannelParams base, const json& block) {
  if (!block.is_object()) return base;
  auto pick = [&](std::initializer_list<const char*> keys, auto& target) {
    for (const char* key : keys) {
      if (auto it = block.find(key); it != block.end() && !it->is_null()) {
        try {
          it->get_to(target);
        } catch (const json::exception&) {
          throw ConfigError({ConfigError::Field{keys.begin()[0], "wrong type"}});
        }
        return;
      }
    }
  };
  pick({"persona"}, base.persona);
  pick({"focus"}, base.focus);
  pick({"temperature"}, base.temperature);
  pick({"branching_factor_b", "b"}, base.branching_factor_b);
  pick({"max_depth_D", "D"}, base.max_depth_D);
  pick({"confidence_threshold_tau", "tau"}, base.confidence_threshold_tau);
  pick({"coverage_threshold"}, base.coverage_threshold);
  return base;
}

void to_json(json& j, const ChecklistItem& c) {
  j = json{{"description", c.description}, {"addressed", c.addressed}};
}

void from_json(const json& j, ChecklistItem& c) {
  j.at("description").get_to(c.description);
  c.addressed = j.value("addressed", false);
}

void to_json(json& j, const CoverageChecklist& c) {
  j = json{{"items", c.items}, {"generated_at_depth", c.generated_at_depth}};
}

void from_json(const json& j, CoverageChecklist& c) {
  j.at("items").get_to(c.items);
  c.generated_at_depth = j.value("generated_at_depth", 0);
}

void to_json(json& j, const SemanticState& s) {
  j = json{{"id", s.id},
           {"question", s.question},
           {"thought", s.thought},
           {"params", s.params},
           {"depth_d", s.depth_d},
           {"confidence_c", s.confidence_c ? json(*s.confidence_c) : json(nullptr)},
           {"coverage", s.coverage ? json(*s.coverage) : json(nullptr)},
           {"completion_registered", s.completion_registered},
           {"parent_id", s.parent_id ? json(*s.parent_id) : json(nullptr)},
           {"created_at", s.created_at},
           {"checklist", s.checklist ? json(*s.checklist) : json(nullptr)},
           {"annotations", s.annotations}};
}

void from_json(const json& j, SemanticState& s) {
  j.at("id").get_to(s.id);
  j.at("question").get_to(s.question);
  j.at("thought").get_to(s.thought);
  j.at("params").get_to(s.params);
  j.at("depth_d").get_to(s.depth_d);
  s.confidence_c = optional_field<double>(j, "confidence_c");
  s.coverage = optional_field<double>(j, "coverage");
  s.completion_registered = j.value("completion_registered", false);
  s.parent_id = optional_field<std::string>(j, "parent_id");
  s.created_at = j.value("created_at", std::int64_t{0});
  s.checklist = optional_field<CoverageChecklist>(j, "checklist");
  s.annotations = j.value("annotations", std::vector<std::string>{});
}

void to_json(json& j, const RunEvent& e) {
  j = json{{"seq", e.seq},
           {"run_id", e.run_id},
           {"channel_id", e.channel_id},
           {"kind", to_string(e.kind)},
           {"payload", e.payload},
           {"timestamp", e.timestamp},
           {"wall_time_ms", e.wall_time_ms}};
}

void from_json(const json& j, RunEvent& e) {
  j.at("seq").get_to(e.seq);
  j.at("run_id").get_to(e.run_id);
  e.channel_id = j.value("channel_id", std::string{});
  e.kind = event_kind_from_string(j.at("kind").get<std::string>());
  e.payload = j.value("payload", json::object());
  e.timestamp = j.value("timestamp", std::int64_t{0});
  e.wall_time_ms = j.value("wall_time_ms", std::int64_t{0});
}

SemanticState init_state(std::string_view question, const ChannelParams& params, std::string id,
                         std::int64_t created_at) {
  auto q = trim(question);
  if (q.empty()) throw Error(Errc::empty_question, "question is blank");

  std::string thought = "Question: " + q;
  if (!params.persona.empty()) thought += "\nPersona: you are reasoning as " + params.persona + ".";
  if (!params.focus.empty()) thought += "\nFocus: " + params.focus + ".";

  SemanticState s;
  s.id = std::move(id);
  s.question = std::move(q);
  s.thought = std::move(thought);
  s.params = params;
  s.depth_d = 0;
  s.created_at = created_at;
  return s;
}

bool in_scope(std::string_view channel, std::string_view scope) noexcept {
  if (scope.empty()) return true;
  if (channel.size() < scope.size() || channel.substr(0, scope.size()) != scope) return false;
  return channel.size() == scope.size() || channel[scope.size()] == '.';
}

std::string trim(std::string_view text) {
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  std::size_t b = 0, e = text.size();
  while (b < e && is_space(static_cast<unsigned char>(text[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(text[e - 1]))) --e;
  return std::string(text.substr(b, e - b));
}

std::string to_lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace clio
