#include "clio/cognitive_loop.hpp"

#include <algorithm>
#include <regex>
#include <sstream>
#include <thread>

#include "clio/error.hpp"
#include "clio/parsing.hpp"
#include "clio/prompts.hpp"

namespace clio {

// ---------------------------------------------------------------------------
// Config

void validate(const LoopConfig& c) {
  std::vector<ConfigError::Field> bad;
  if (!(c.child_temperature >= 0 && c.child_temperature <= 2))
    bad.push_back({"child_temperature", "must lie in [0, 2]"});
  if (!(c.eval_temperature >= 0 && c.eval_temperature <= 2))
    bad.push_back({"eval_temperature", "must lie in [0, 2]"});
  if (c.call_budget < 1) bad.push_back({"budget", "must be >= 1"});
  if (c.max_parallel_channels < 1) bad.push_back({"max_parallel_channels", "must be >= 1"});
  if (!bad.empty()) throw ConfigError(std::move(bad));
}

void to_json(json& j, const LoopConfig& c) {
  j = json{{"child_temperature", c.child_temperature},
           {"eval_temperature", c.eval_temperature},
           {"budget", c.call_budget},
           {"max_parallel_channels", c.max_parallel_channels},
           {"parent_summary_chars", c.parent_summary_chars}};
}

LoopConfig merge_loop_config(LoopConfig base, const json& block) {
  if (!block.is_object()) return base;
  auto pick = [&](const char* key, auto& target) {
    if (auto it = block.find(key); it != block.end() && !it->is_null()) {
      try {
        it->get_to(target);
      } catch (const json::exception&) {
        throw ConfigError({ConfigError::Field{key, "wrong type"}});
      }
    }
  };
  pick("child_temperature", base.child_temperature);
  pick("eval_temperature", base.eval_temperature);
  pick("budget", base.call_budget);
  pick("max_parallel_channels", base.max_parallel_channels);
  pick("parent_summary_chars", base.parent_summary_chars);
  return base;
}

// ---------------------------------------------------------------------------
// Parsers

namespace {

double parse_unit_interval(std::string_view raw, const char* what) {
  auto text = trim(raw);
  auto space = text.find_first_of(" \t(");
  if (space != std::string::npos) text = text.substr(0, space);
  while (!text.empty() && (text.back() == '.' || text.back() == ',')) text.pop_back();
  auto value = parse_real(text);
  if (!value) malformed(std::string(what) + " is not a number: '" + std::string(raw) + "'");
  if (*value < 0.0 || *value > 1.0)
    malformed(std::string(what) + " outside [0,1]: " + std::string(raw));
  return *value;
}

std::vector<std::string> split_ids(std::string_view text) {
  std::vector<std::string> ids;
  std::string current;
  for (char c : text) {
    if (c == ',' || c == ' ' || c == ';') {
      if (!current.empty()) ids.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) ids.push_back(std::move(current));
  return ids;
}

}  // namespace

ConfidenceReading parse_confidence(const ModelResponse& response) {
  ConfidenceReading reading;
  if (auto obj = parse_json_object(response.text)) {
    auto it = obj->find("confidence");
    if (it == obj->end() || !it->is_number()) malformed("reply has no numeric confidence");
    reading.confidence = it->get<double>();
    if (reading.confidence < 0 || reading.confidence > 1) malformed("confidence outside [0,1]");
    for (const auto& u : obj->value("uncertainties", json::array())) {
      RaisedUncertainty r;
      r.level = u.value("level", -1.0);
      r.description = u.value("description", std::string{});
      if (r.level < 0 || r.level > 1) malformed("uncertainty level outside [0,1]");
      reading.uncertainties.push_back(std::move(r));
    }
    for (const auto& a : obj->value("addressed", json::array())) reading.addressed.push_back(a.get<std::string>());
    return reading;
  }

  auto kv = parse_key_values(response.text);
  auto conf = first_value(kv, "confidence");
  if (!conf) malformed("reply has no 'confidence:' line");
  reading.confidence = parse_unit_interval(*conf, "confidence");
  for (const auto& line : all_values(kv, "uncertainty")) {
    auto parts = split_bars(line);
    RaisedUncertainty r;
    r.level = parse_unit_interval(parts[0], "uncertainty level");
    for (std::size_t i = 1; i < parts.size(); ++i) {
      if (!r.description.empty()) r.description += " | ";
      r.description += parts[i];
    }
    reading.uncertainties.push_back(std::move(r));
  }
  for (const auto& line : all_values(kv, "addressed"))
    for (auto& id : split_ids(line)) reading.addressed.push_back(std::move(id));
  return reading;
}

CoverageChecklist parse_checklist(const ModelResponse& response) {
  CoverageChecklist checklist;
  if (auto obj = parse_json_object(response.text)) {
    for (const auto& item : obj->value("items", json::array())) {
      ChecklistItem c;
      c.description = item.value("description", std::string{});
      c.addressed = item.value("addressed", false);
      if (!c.description.empty()) checklist.items.push_back(std::move(c));
    }
  } else {
    static const std::regex line_re(R"(^\s*(?:[-*]|\d+[.)])?\s*\[([ xX])\]\s*(.+?)\s*$)");
    std::istringstream in(response.text);
    std::string line;
    std::smatch m;
    while (std::getline(in, line)) {
      if (std::regex_match(line, m, line_re))
        checklist.items.push_back({m[2].str(), m[1].str() != " "});
    }
  }
  if (checklist.items.empty()) malformed("checklist has no '- [ ]' / '- [x]' items");
  return checklist;
}

ChannelParams apply_param_proposal(const ChannelParams& current, const ModelResponse& response) {
  ChannelParams next = current;
  KeyValues kv;
  if (auto obj = parse_json_object(response.text)) {
    for (const auto& [k, v] : obj->items())
      kv.emplace_back(to_lower(k), v.is_string() ? v.get<std::string>() : v.dump());
  } else {
    kv = parse_key_values(response.text);
  }
  auto number = [&](std::initializer_list<const char*> keys) -> std::optional<double> {
    for (const char* key : keys) {
      if (auto v = first_value(kv, key)) {
        auto parsed = parse_real(*v);
        if (!parsed) malformed(std::string("'") + key + "' is not a number: " + *v);
        return parsed;
      }
    }
    return std::nullopt;
  };
  if (auto v = first_value(kv, "persona")) next.persona = *v;
  if (auto v = first_value(kv, "focus")) next.focus = *v;
  if (auto t = number({"temperature"})) next.temperature = std::clamp(*t, 0.0, 2.0);
  if (auto b = number({"branching_factor_b", "b"}))
    next.branching_factor_b = std::clamp(static_cast<int>(*b), 1, current.branching_factor_b);
  if (auto d = number({"max_depth_d", "d"}))
    next.max_depth_D = std::clamp(static_cast<int>(*d), 0, current.max_depth_D);
  if (auto tau = number({"confidence_threshold_tau", "tau"}))
    next.confidence_threshold_tau = std::clamp(*tau, 0.0, current.confidence_threshold_tau);
  return next;
}

// ---------------------------------------------------------------------------
// Bounds

namespace {

std::int64_t subtree_calls(int b, int D, int d) {
  constexpr std::int64_t kEval = 3;       // coverage, completion, confidence
  constexpr std::int64_t kSpawn = 2;      // self-optimization, sample
  constexpr std::int64_t kSynthesis = 2;  // synthesis, confidence on it
  if (d >= D) return kEval + b * (kSpawn + kEval);
  return kEval + b * kSpawn + b * subtree_calls(b, D, d + 1) + kSynthesis;
}

}  // namespace

std::int64_t max_model_calls(int b, int D) {
  return subtree_calls(b, D, 0) + 2;
}

std::int64_t max_spawned_states(int b, int D) {
  std::int64_t total = 0, level = 1;
  for (int k = 1; k <= D; ++k) {
    level *= b;
    total += level;
  }
  return total + level * b;
}

// ---------------------------------------------------------------------------
// Operations

CognitiveLoop::CognitiveLoop(Gateway& gateway, LoopConfig config)
    : gateway_(gateway), config_(config) {
  validate(config_);
}

double CognitiveLoop::assess_confidence(SemanticState& state, RunContext& run, int* tally) {
  if (trim(state.thought).empty())
    throw Error(Errc::invalid_argument, "cannot assess a state with an empty thought");

  const auto open = run.open_uncertainties(state.id);
  auto request = prompts::confidence(state, open, run.guidance_for(state.id), config_.eval_temperature);
  auto reading = gateway_.complete_structured(std::move(request), parse_confidence,
                                              CallSite{&run, state.id, tally});
  state.confidence_c = reading.confidence;
  run.emit(state.id, EventKind::confidence,
           json{{"state_id", state.id}, {"depth", state.depth_d}, {"confidence", reading.confidence}});

  std::vector<std::string> addressed;
  for (const auto& id : reading.addressed) {
    const bool visible = std::any_of(open.begin(), open.end(), [&](const auto& u) { return u.id == id; });
    if (visible && std::find(addressed.begin(), addressed.end(), id) == addressed.end())
      addressed.push_back(id);
  }
  if (reading.uncertainties.empty())
    reading.uncertainties.push_back({1.0 - reading.confidence, "residual uncertainty after self-assessment"});
  for (std::size_t i = 0; i < reading.uncertainties.size(); ++i) {
    const auto& u = reading.uncertainties[i];
    run.emit(state.id, EventKind::uncertainty,
             json{{"id", run.next_uncertainty_id()},
                  {"level", u.level},
                  {"description", u.description},
                  {"addressed_prior_ids", i == 0 ? addressed : std::vector<std::string>{}},
                  {"state_id", state.id}});
  }
  return reading.confidence;
}

double CognitiveLoop::compute_coverage(SemanticState& state, RunContext& run, int* tally) {
  const auto guidance = run.guidance_for(state.id);
  const bool fresh = !state.checklist.has_value();
  auto request = fresh ? prompts::coverage_generate(state, guidance, config_.eval_temperature)
                       : prompts::coverage_update(state, *state.checklist, guidance,
                                                  config_.eval_temperature);
  auto checklist = gateway_.complete_structured(std::move(request), parse_checklist,
                                                CallSite{&run, state.id, tally});
  checklist.generated_at_depth = fresh ? state.depth_d : state.checklist->generated_at_depth;
  const double coverage = checklist.coverage();
  state.checklist = std::move(checklist);
  state.coverage = coverage;
  if (coverage >= state.params.coverage_threshold) state.completion_registered = true;
  run.emit(state.id, EventKind::coverage,
           json{{"state_id", state.id},
                {"coverage", coverage},
                {"addressed", state.checklist->addressed()},
                {"total", state.checklist->items.size()},
                {"generated", fresh},
                {"registered", state.completion_registered}});
  return coverage;
}

CompletionStatus CognitiveLoop::check_completion(const SemanticState& state, RunContext& run,
                                                 int* tally) {
  if (!state.completion_registered) return {false, "completion function not registered"};

  auto request = prompts::completion(state, run.guidance_for(state.id), config_.eval_temperature);
  auto status = gateway_.complete_structured(
      std::move(request),
      [](const ModelResponse& r) {
        CompletionStatus s;
        if (r.tool_invocation) {
          if (r.tool_invocation->name != prompts::kCompletionTool)
            malformed("unknown function invoked: " + r.tool_invocation->name);
          s.terminal = true;
          s.rationale = r.tool_invocation->arguments.value("rationale", r.text);
        } else {
          s.rationale = trim(r.text);
        }
        return s;
      },
      CallSite{&run, state.id, tally});
  run.emit(state.id, EventKind::completion,
           json{{"state_id", state.id}, {"terminal", status.terminal}, {"rationale", status.rationale}});
  return status;
}

ChannelParams CognitiveLoop::self_optimize(const SemanticState& state,
                                           std::span<const std::string> unresolved,
                                           RunContext& run, int* tally, const std::string& child_id,
                                           int child_index, int child_count) {
  const std::string& channel = child_id.empty() ? state.id : child_id;
  std::vector<std::string> open(unresolved.begin(), unresolved.end());
  auto request = prompts::optimize(state, channel, open, child_index, child_count,
                                   run.guidance_for(channel), config_.eval_temperature);
  auto next = gateway_.complete_structured(
      std::move(request),
      [&](const ModelResponse& r) { return apply_param_proposal(state.params, r); },
      CallSite{&run, channel, tally});
  run.emit(channel, EventKind::optimize,
           json{{"from", state.params}, {"to", next}, {"unresolved", open}});
  return next;
}

std::vector<SemanticState> CognitiveLoop::sample_next(const SemanticState& state, int n,
                                                      RunContext& run, int* tally, bool flat,
                                                      int first_index) {
  if (n < 1) throw Error(Errc::invalid_argument, "sample_next needs n >= 1");

  std::vector<std::string> unresolved;
  for (const auto& u : run.open_uncertainties(state.id)) unresolved.push_back(u.description);

  SemanticState basis = state;
  basis.params.temperature = config_.child_temperature;
  const auto summary = prompts::clip(state.thought, config_.parent_summary_chars);

  std::vector<SemanticState> children;
  children.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const int index = first_index + k;
    const std::string child_id = state.id + (flat ? ".f" : ".") + std::to_string(index);
    try {
      run.emit(child_id, EventKind::spawn,
               json{{"parent_id", state.id},
                    {"depth", state.depth_d + 1},
                    {"flat", flat},
                    {"index", index}});

      SemanticState child;
      child.id = child_id;
      child.question = state.question;
      child.params = self_optimize(basis, unresolved, run, tally, child_id, index, flat ? 1 : n);
      child.depth_d = state.depth_d + 1;
      child.parent_id = state.id;
      child.checklist = state.checklist;
      child.created_at = run.now();

      auto request = prompts::sample(child.question, child_id, child.params, summary, child.depth_d,
                                     run.guidance_for(child_id));
      child.thought = gateway_.complete_structured(
          std::move(request),
          [](const ModelResponse& r) {
            auto text = trim(r.text);
            if (text.empty()) malformed("empty continuation");
            return text;
          },
          CallSite{&run, child_id, tally});
      run.emit(child_id, EventKind::sample, json{{"state", child}});
      children.push_back(std::move(child));
    } catch (const Error& e) {
      // A child terminated while being created is dropped; its siblings live on.
      if (e.code() != Errc::cancelled || run.terminated(state.id) || !run.terminated(child_id)) throw;
    }
  }
  return children;
}

SemanticState CognitiveLoop::synthesize(std::span<const SemanticState> results,
                                        const SemanticState& parent, RunContext& run, int* tally) {
  if (results.empty()) {
    SemanticState fallback = parent;
    fallback.confidence_c = 0.0;
    fallback.annotations.push_back("no confident findings");
    run.emit(parent.id, EventKind::synthesis,
             json{{"state_id", parent.id}, {"inputs", json::array()}, {"fallback", true}});
    return fallback;
  }

  const std::string synth_id = parent.id + ".syn";
  std::vector<SemanticState> inputs(results.begin(), results.end());
  json input_ids = json::array();
  for (const auto& r : inputs) input_ids.push_back(r.id);

  run.emit(synth_id, EventKind::spawn,
           json{{"parent_id", parent.id}, {"depth", parent.depth_d}, {"synthesis", true}});
  auto request = prompts::synthesize(parent, synth_id, inputs, run.guidance_for(synth_id));
  auto response = gateway_.complete(request, CallSite{&run, synth_id, tally});

  SemanticState out;
  out.id = synth_id;
  out.question = parent.question;
  out.thought = trim(response.text);
  if (out.thought.empty()) out.thought = inputs.front().thought;
  out.params = parent.params;
  out.depth_d = parent.depth_d;
  out.parent_id = parent.id;
  out.checklist = parent.checklist;
  out.created_at = run.now();
  run.emit(synth_id, EventKind::synthesis,
           json{{"state_id", synth_id}, {"inputs", input_ids}, {"fallback", false}, {"thought", out.thought}});
  assess_confidence(out, run, tally);
  return out;
}

// ---------------------------------------------------------------------------
// Recursion

bool CognitiveLoop::stops(SemanticState& state, RunContext& run, int& tally) {
  compute_coverage(state, run, &tally);
  auto status = check_completion(state, run, &tally);
  if (status.terminal) return true;
  return assess_confidence(state, run, &tally) >= state.params.confidence_threshold_tau;
}

template <class Fn>
void CognitiveLoop::fork_join(std::size_t n, Fn&& fn, std::vector<std::exception_ptr>& errors) {
  errors.assign(n, nullptr);
  std::vector<std::thread> threads;
  const int extra_workers = config_.max_parallel_channels - 1;
  for (std::size_t i = 0; i < n; ++i) {
    auto task = [&fn, &errors, i] {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    bool offload = false;
    if (i + 1 < n) {
      int current = active_workers_.load();
      while (current < extra_workers) {
        if (active_workers_.compare_exchange_weak(current, current + 1)) {
          offload = true;
          break;
        }
      }
    }
    if (offload) {
      threads.emplace_back([this, task] {
        task();
        --active_workers_;
      });
    } else {
      task();
    }
  }
  for (auto& t : threads) t.join();
}

ChannelResult CognitiveLoop::clio(SemanticState state, int depth, RunContext& run) {
  ChannelResult out;
  int tally = 0;
  auto finish = [&]() -> ChannelResult {
    out.call_count += tally;
    return std::move(out);
  };

  try {
    const bool stop = stops(state, run, tally);
    out.visited.push_back(state);
    if (stop) {
      out.states.push_back(state);
      return finish();
    }
  } catch (const Error& e) {
    if (e.code() != Errc::budget_exceeded) throw;
    out.visited.push_back(state);
    out.budget_exhausted = true;
    return finish();
  }

  const int b = state.params.branching_factor_b;

  if (depth >= state.params.max_depth_D) {
    for (int i = 0; i < b; ++i) {
      try {
        auto sampled = sample_next(state, 1, run, &tally, /*flat=*/true, i + 1);
        if (sampled.empty()) continue;
        auto& candidate = sampled.front();
        const bool stop = stops(candidate, run, tally);
        out.visited.push_back(candidate);
        if (stop) {
          out.states.push_back(std::move(candidate));
          break;
        }
      } catch (const Error& e) {
        if (e.code() == Errc::cancelled && !run.terminated(state.id)) continue;
        if (e.code() != Errc::budget_exceeded) throw;
        out.budget_exhausted = true;
        break;
      }
    }
    return finish();
  }

  std::vector<SemanticState> children;
  try {
    children = sample_next(state, b, run, &tally);
  } catch (const Error& e) {
    if (e.code() != Errc::budget_exceeded) throw;
    out.budget_exhausted = true;
    return finish();
  }

  std::vector<ChannelResult> subs(children.size());
  std::vector<std::exception_ptr> errors;
  fork_join(
      children.size(), [&](std::size_t i) { subs[i] = clio(children[i], depth + 1, run); }, errors);

  std::exception_ptr first_failure;
  for (auto& err : errors) {
    if (!err) continue;
    try {
      std::rethrow_exception(err);
    } catch (const Error& e) {
      // A terminated child subtree contributes nothing; the rest carries on.
      if (e.code() == Errc::cancelled && !run.terminated(state.id)) continue;
      if (!first_failure) first_failure = err;
    } catch (...) {
      if (!first_failure) first_failure = err;
    }
  }
  if (first_failure) std::rethrow_exception(first_failure);

  for (auto& sub : subs) {
    out.call_count += sub.call_count;
    out.budget_exhausted = out.budget_exhausted || sub.budget_exhausted;
    for (auto& s : sub.states) out.states.push_back(std::move(s));
    for (auto& s : sub.visited) out.visited.push_back(std::move(s));
  }

  run.checkpoint(state.id);
  try {
    auto synthesized = synthesize(out.states, state, run, &tally);
    if (synthesized.id != state.id) out.visited.push_back(synthesized);
    out.synthesized = std::move(synthesized);
  } catch (const Error& e) {
    if (e.code() != Errc::budget_exceeded) throw;
    out.budget_exhausted = true;
  }
  return finish();
}

ChannelRun CognitiveLoop::run_channel(const std::string& question, const ChannelParams& params,
                                      RunContext& run, const std::string& root_id,
                                      bool emit_answer) {
  validate(params);
  auto root = init_state(question, params, root_id, run.now());
  run.emit(root_id, EventKind::spawn, json{{"parent_id", nullptr}, {"depth", 0}, {"state", root}});

  ChannelRun outcome;
  outcome.result = clio(root, 0, run);
  outcome.budget_exhausted = outcome.result.budget_exhausted;

  if (outcome.result.synthesized) {
    outcome.answer = *outcome.result.synthesized;
  } else {
    int tally = 0;
    try {
      outcome.answer = synthesize(outcome.result.states, root, run, &tally);
      if (outcome.answer.id != root.id) outcome.result.visited.push_back(outcome.answer);
    } catch (const Error& e) {
      if (e.code() != Errc::budget_exceeded) throw;
      outcome.budget_exhausted = true;
      const auto& states = outcome.result.states;
      auto best = std::max_element(states.begin(), states.end(), [](const auto& a, const auto& b) {
        return a.confidence_c.value_or(0) < b.confidence_c.value_or(0);
      });
      outcome.answer = best != states.end() ? *best : synthesize({}, root, run, nullptr);
    }
    outcome.result.call_count += tally;
  }

  if (emit_answer) {
    run.emit(root_id, EventKind::answer,
             json{{"state_id", outcome.answer.id},
                  {"answer", outcome.answer.thought},
                  {"confidence", outcome.answer.confidence_c ? json(*outcome.answer.confidence_c)
                                                             : json(nullptr)},
                  {"call_count", outcome.result.call_count},
                  {"budget_exhausted", outcome.budget_exhausted}});
  }
  outcome.events = run.events();
  return outcome;
}

}  // namespace clio
