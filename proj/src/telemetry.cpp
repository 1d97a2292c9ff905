#include "clio/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <boost/math/distributions/students_t.hpp>

#include "clio/error.hpp"
#include "clio/parsing.hpp"
#include "clio/prompts.hpp"

namespace clio {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

json real_or_sentinel(double v) {
  if (std::isinf(v)) return v > 0 ? json("inf") : json("-inf");
  return v;
}

double real_from_sentinel(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return kInf;
    if (s == "-inf") return -kInf;
    throw Error(Errc::parse_error, "expected a number or inf sentinel, got '" + s + "'");
  }
  return j.get<double>();
}

UncertaintyEvent from_run_event(const RunEvent& e) {
  UncertaintyEvent u;
  u.id = e.payload.value("id", "seq" + std::to_string(e.seq));
  u.timestamp = e.timestamp;
  u.level = e.payload.value("level", 0.0);
  u.description = e.payload.value("description", std::string{});
  u.addressed_prior_ids = e.payload.value("addressed_prior_ids", std::vector<std::string>{});
  u.channel_id = e.channel_id;
  return u;
}

}  // namespace

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::correct: return "correct";
    case Outcome::incorrect: return "incorrect";
    case Outcome::unknown: return "unknown";
  }
  return "unknown";
}

Outcome outcome_from_string(std::string_view s) {
  if (s == "correct") return Outcome::correct;
  if (s == "incorrect") return Outcome::incorrect;
  if (s == "unknown") return Outcome::unknown;
  throw Error(Errc::parse_error, "unknown outcome '" + std::string(s) + "'");
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::low_negative: return "low-negative";
    case Regime::addressed_negative: return "addressed-negative";
    case Regime::low_positive: return "low-positive";
    case Regime::high_positive: return "high-positive";
  }
  return "low-negative";
}

std::vector<double> UncertaintyTrace::levels() const {
  std::vector<double> out;
  out.reserve(events.size());
  for (const auto& e : events) out.push_back(e.level);
  return out;
}

// ---------------------------------------------------------------------------
// Extraction

UncertaintyTrace extract_trace(std::span<const RunEvent> events) {
  std::vector<const RunEvent*> picked;
  for (const auto& e : events)
    if (e.kind == EventKind::uncertainty) picked.push_back(&e);
  std::stable_sort(picked.begin(), picked.end(), [](const RunEvent* a, const RunEvent* b) {
    return a->timestamp != b->timestamp ? a->timestamp < b->timestamp : a->seq < b->seq;
  });

  UncertaintyTrace trace;
  if (!events.empty()) trace.run_id = events.front().run_id;
  for (const auto* e : picked) trace.events.push_back(from_run_event(*e));
  return trace;
}

namespace {

std::vector<UncertaintyEvent> parse_extraction(const ModelResponse& response) {
  struct Raw {
    double level;
    std::string description;
    std::vector<std::size_t> addresses;
  };
  std::vector<Raw> raw;

  auto index_list = [](std::string_view text) {
    std::vector<std::size_t> out;
    std::string token;
    auto flush = [&] {
      if (token.empty()) return;
      auto v = parse_real(token);
      if (!v || *v < 0 || std::floor(*v) != *v) malformed("bad uncertainty index '" + token + "'");
      out.push_back(static_cast<std::size_t>(*v));
      token.clear();
    };
    for (char c : text) {
      if (c == ',' || c == ' ') flush();
      else token.push_back(c);
    }
    flush();
    return out;
  };

  if (auto obj = parse_json_object(response.text)) {
    for (const auto& u : obj->value("uncertainties", json::array())) {
      Raw r{u.value("level", -1.0), u.value("description", std::string{}), {}};
      for (const auto& a : u.value("addresses", json::array())) r.addresses.push_back(a.get<std::size_t>());
      raw.push_back(std::move(r));
    }
  } else {
    for (const auto& line : all_values(parse_key_values(response.text), "uncertainty")) {
      auto parts = split_bars(line);
      auto level = parse_real(parts[0]);
      if (!level) malformed("uncertainty level is not a number: '" + parts[0] + "'");
      Raw r{*level, {}, {}};
      for (std::size_t i = 1; i < parts.size(); ++i) {
        const auto lower = to_lower(parts[i]);
        if (lower.rfind("addresses:", 0) == 0) {
          r.addresses = index_list(trim(parts[i].substr(10)));
        } else {
          if (!r.description.empty()) r.description += " | ";
          r.description += parts[i];
        }
      }
      raw.push_back(std::move(r));
    }
  }

  std::vector<UncertaintyEvent> out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].level < 0 || raw[i].level > 1) malformed("uncertainty level outside [0,1]");
    UncertaintyEvent e;
    e.id = "u" + std::to_string(i);
    e.timestamp = static_cast<std::int64_t>(i);
    e.level = raw[i].level;
    e.description = raw[i].description;
    for (auto a : raw[i].addresses) {
      if (a >= i) malformed("uncertainty " + std::to_string(i) + " addresses a later one");
      e.addressed_prior_ids.push_back("u" + std::to_string(a));
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

UncertaintyTrace extract_trace_from_transcript(const std::string& run_id,
                                               const std::string& transcript, Gateway& gateway,
                                               double temperature) {
  UncertaintyTrace trace;
  trace.run_id = run_id;
  trace.events = gateway.complete_structured(prompts::extract_uncertainty(transcript, temperature),
                                             parse_extraction);
  return trace;
}

UncertaintyTrace extract_trace(std::span<const RunEvent> events, Gateway& gateway) {
  auto trace = extract_trace(events);
  if (!trace.events.empty()) return trace;

  std::ostringstream transcript;
  for (const auto& e : events) {
    if (e.kind == EventKind::sample && e.payload.contains("state")) {
      transcript << "[" << e.channel_id << "] " << e.payload["state"].value("thought", "") << "\n\n";
    } else if (e.kind == EventKind::synthesis && e.payload.contains("thought")) {
      transcript << "[" << e.channel_id << "] " << e.payload.value("thought", "") << "\n\n";
    }
  }
  if (transcript.tellp() == 0) return trace;
  auto extracted = extract_trace_from_transcript(trace.run_id, transcript.str(), gateway);
  if (trace.run_id.empty() && !events.empty()) extracted.run_id = events.front().run_id;
  return extracted;
}

// ---------------------------------------------------------------------------
// Features

SlopeStats slope_stats(std::span<const double> y) {
  const std::size_t n = y.size();
  if (n < 2) throw Error(Errc::too_few_events, "slope needs at least 2 events, got " + std::to_string(n));

  if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })) return {0.0, 0.0};

  const double x_mean = (static_cast<double>(n) - 1.0) / 2.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) sxx += (i - x_mean) * (i - x_mean);
  // Pairing index i with its mirror keeps the slope exactly antisymmetric
  // under time reversal.
  double sxy = 0.0;
  for (std::size_t i = 0; i < n / 2; ++i) sxy += (i - x_mean) * (y[i] - y[n - 1 - i]);
  const double slope = sxy / sxx;

  const double y_mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double ssr = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double fitted = y_mean + slope * (i - x_mean);
    ssr += (y[i] - fitted) * (y[i] - fitted);
    syy += (y[i] - y_mean) * (y[i] - y_mean);
  }
  if (slope == 0.0) return {0.0, 0.0};
  if (n == 2 || ssr <= 1e-20 * syy) return {slope, slope > 0 ? kInf : -kInf};

  const double se = std::sqrt(ssr / static_cast<double>(n - 2) / sxx);
  return {slope, slope / se};
}

SlopeStats slope_stats(const UncertaintyTrace& trace) {
  const auto y = trace.levels();
  return slope_stats(std::span<const double>(y));
}

int oscillation_count(std::span<const double> y, double amplitude_eps) {
  if (amplitude_eps < 0) throw Error(Errc::invalid_argument, "amplitude_eps must be >= 0");
  int count = 0;
  for (std::size_t i = 2; i < y.size(); ++i) {
    const double d1 = y[i - 1] - y[i - 2];
    const double d2 = y[i] - y[i - 1];
    if (std::abs(d1) > amplitude_eps && std::abs(d2) > amplitude_eps && (d1 > 0) != (d2 > 0)) ++count;
  }
  return count;
}

int oscillation_count(const UncertaintyTrace& trace, double amplitude_eps) {
  const auto y = trace.levels();
  return oscillation_count(std::span<const double>(y), amplitude_eps);
}

double addressing_ratio(const UncertaintyTrace& trace) {
  if (trace.events.empty()) return 1.0;
  std::unordered_set<std::string> ids, addressed;
  for (const auto& e : trace.events) ids.insert(e.id);
  for (const auto& e : trace.events)
    for (const auto& a : e.addressed_prior_ids)
      if (ids.count(a)) addressed.insert(a);
  return static_cast<double>(addressed.size()) / static_cast<double>(trace.events.size());
}

TraceFeatures compute_features(const UncertaintyTrace& trace, double amplitude_eps) {
  TraceFeatures f;
  const auto y = trace.levels();
  f.n_events = static_cast<int>(y.size());
  f.addressing_ratio = addressing_ratio(trace);
  if (y.empty()) return f;
  f.initial_uncertainty = y.front();
  const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  f.uncertainty_range = *hi - *lo;
  f.mean_level = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  if (y.size() >= 2) {
    const auto s = slope_stats(std::span<const double>(y));
    f.slope = s.slope;
    f.slope_t_stat = s.t_stat;
  }
  f.oscillation_count = oscillation_count(std::span<const double>(y), amplitude_eps);
  return f;
}

Classification classify_trace(const TraceFeatures& f, const EscalationConfig& config) {
  const bool high = f.mean_level >= config.high_mean_threshold;
  Classification c;
  if (f.slope > 0) c.regime = high ? Regime::high_positive : Regime::low_positive;
  else c.regime = high ? Regime::addressed_negative : Regime::low_negative;
  c.escalate = f.slope > 0 || f.oscillation_count >= config.oscillation_threshold;
  return c;
}

// ---------------------------------------------------------------------------
// Group comparison

const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names{
      "initial_uncertainty", "uncertainty_range", "mean_level",     "slope",
      "slope_t_stat",        "oscillation_count", "addressing_ratio", "n_events"};
  return names;
}

double feature_value(const TraceFeatures& f, const std::string& name) {
  if (name == "initial_uncertainty") return f.initial_uncertainty;
  if (name == "uncertainty_range") return f.uncertainty_range;
  if (name == "mean_level") return f.mean_level;
  if (name == "slope") return f.slope;
  if (name == "slope_t_stat") return f.slope_t_stat;
  if (name == "oscillation_count") return f.oscillation_count;
  if (name == "addressing_ratio") return f.addressing_ratio;
  if (name == "n_events") return f.n_events;
  throw Error(Errc::invalid_argument, "unknown feature '" + name + "'");
}

GroupComparison compare_samples(std::span<const double> correct, std::span<const double> incorrect) {
  if (correct.size() < 2 || incorrect.size() < 2)
    throw Error(Errc::too_few_samples, "each group needs at least 2 samples");
  auto finite = [](double v) { return std::isfinite(v); };
  if (!std::all_of(correct.begin(), correct.end(), finite) ||
      !std::all_of(incorrect.begin(), incorrect.end(), finite))
    throw Error(Errc::invalid_argument, "group comparison over non-finite values");

  auto moments = [](std::span<const double> v) {
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::pair{mean, ss / (n - 1.0)};
  };
  const auto [m_c, var_c] = moments(correct);
  const auto [m_i, var_i] = moments(incorrect);
  const double n_c = static_cast<double>(correct.size());
  const double n_i = static_cast<double>(incorrect.size());

  GroupComparison out;
  out.mean_correct = m_c;
  out.mean_incorrect = m_i;
  const double diff = m_i - m_c;

  const double pooled = std::sqrt(((n_c - 1) * var_c + (n_i - 1) * var_i) / (n_c + n_i - 2));
  out.effect_size = pooled > 0 ? diff / pooled : (diff == 0 ? 0.0 : std::copysign(kInf, diff));

  const double a = var_c / n_c, b = var_i / n_i;
  const double se2 = a + b;
  if (se2 == 0) {
    out.p_value = diff == 0 ? 1.0 : 0.0;
    out.t_stat = diff == 0 ? 0.0 : std::copysign(kInf, diff);
    out.degrees_of_freedom = n_c + n_i - 2;
    return out;
  }
  out.t_stat = diff / std::sqrt(se2);
  out.degrees_of_freedom = se2 * se2 / (a * a / (n_c - 1) + b * b / (n_i - 1));
  boost::math::students_t dist(out.degrees_of_freedom);
  out.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t_stat))));
  return out;
}

GroupComparison compare_groups(std::span<const TraceFeatures> correct,
                               std::span<const TraceFeatures> incorrect, const std::string& feature) {
  std::vector<double> c, i;
  for (const auto& f : correct) c.push_back(feature_value(f, feature));
  for (const auto& f : incorrect) i.push_back(feature_value(f, feature));
  return compare_samples(c, i);
}

// ---------------------------------------------------------------------------
// Live escalation

std::function<std::optional<json>(std::span<const RunEvent>)> make_escalation_check(
    EscalationConfig config) {
  return [config](std::span<const RunEvent> events) -> std::optional<json> {
    const auto trace = extract_trace(events);
    if (trace.events.size() < 2) return std::nullopt;
    const auto features = compute_features(trace, config.amplitude_eps);
    const auto cls = classify_trace(features, config);
    if (!cls.escalate) return std::nullopt;
    json payload;
    payload["features"] = features;
    payload["regime"] = to_string(cls.regime);
    payload["reason"] = features.slope > 0 ? "rising uncertainty" : "oscillating uncertainty";
    return payload;
  };
}

// ---------------------------------------------------------------------------
// Serialization

void to_json(json& j, const UncertaintyEvent& e) {
  j = json{{"id", e.id},
           {"timestamp", e.timestamp},
           {"level", e.level},
           {"description", e.description},
           {"addressed_prior_ids", e.addressed_prior_ids},
           {"channel_id", e.channel_id}};
}

void from_json(const json& j, UncertaintyEvent& e) {
  e.id = j.at("id").get<std::string>();
  e.timestamp = j.value("timestamp", std::int64_t{0});
  e.level = j.at("level").get<double>();
  e.description = j.value("description", std::string{});
  e.addressed_prior_ids = j.value("addressed_prior_ids", std::vector<std::string>{});
  e.channel_id = j.value("channel_id", std::string{});
}

void to_json(json& j, const UncertaintyTrace& t) {
  j = json{{"schema_version", kSchemaVersion}, {"run_id", t.run_id}, {"events", t.events}};
  j["outcome"] = t.outcome ? json(to_string(*t.outcome)) : json(nullptr);
}

void from_json(const json& j, UncertaintyTrace& t) {
  t.run_id = j.value("run_id", std::string{});
  t.events = j.value("events", std::vector<UncertaintyEvent>{});
  t.outcome.reset();
  if (auto it = j.find("outcome"); it != j.end() && it->is_string())
    t.outcome = outcome_from_string(it->get<std::string>());
}

void to_json(json& j, const TraceFeatures& f) {
  j = json{{"initial_uncertainty", f.initial_uncertainty},
           {"uncertainty_range", f.uncertainty_range},
           {"mean_level", f.mean_level},
           {"slope", f.slope},
           {"slope_t_stat", real_or_sentinel(f.slope_t_stat)},
           {"oscillation_count", f.oscillation_count},
           {"addressing_ratio", f.addressing_ratio},
           {"n_events", f.n_events}};
}

void from_json(const json& j, TraceFeatures& f) {
  f.initial_uncertainty = j.at("initial_uncertainty").get<double>();
  f.uncertainty_range = j.at("uncertainty_range").get<double>();
  f.mean_level = j.value("mean_level", 0.0);
  f.slope = j.at("slope").get<double>();
  f.slope_t_stat = real_from_sentinel(j.at("slope_t_stat"));
  f.oscillation_count = j.at("oscillation_count").get<int>();
  f.addressing_ratio = j.at("addressing_ratio").get<double>();
  f.n_events = j.at("n_events").get<int>();
}

std::string features_csv_header() {
  return "run_id,outcome,n_events,initial_uncertainty,uncertainty_range,mean_level,slope,"
         "slope_t_stat,oscillation_count,addressing_ratio,regime,escalate";
}

std::string features_csv_row(const std::string& run_id, const std::optional<Outcome>& outcome,
                             const TraceFeatures& f, const EscalationConfig& config) {
  auto num = [](double v) {
    if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
    std::ostringstream s;
    s.precision(10);
    s << v;
    return s.str();
  };
  const auto cls = classify_trace(f, config);
  std::ostringstream row;
  row << run_id << ',' << (outcome ? to_string(*outcome) : "") << ',' << f.n_events << ','
      << num(f.initial_uncertainty) << ',' << num(f.uncertainty_range) << ',' << num(f.mean_level)
      << ',' << num(f.slope) << ',' << num(f.slope_t_stat) << ',' << f.oscillation_count << ','
      << num(f.addressing_ratio) << ',' << to_string(cls.regime) << ','
      << (cls.escalate ? "true" : "false");
  return row.str();
}

}  // namespace clio
