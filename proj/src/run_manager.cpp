#include "clio/run_manager.hpp"

#include <condition_variable>
#include <fstream>

#include "clio/error.hpp"

namespace clio {

// ---------------------------------------------------------------------------
// Enums

std::string to_string(RunMode m) {
  return m == RunMode::single ? "single" : "more_thinking";
}

RunMode run_mode_from_string(std::string_view s) {
  if (s == "single") return RunMode::single;
  if (s == "more_thinking" || s == "more-thinking") return RunMode::more_thinking;
  throw ConfigError({ConfigError::Field{"mode", "must be 'single' or 'more_thinking'"}});
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::running: return "running";
    case RunStatus::awaiting_user: return "awaiting_user";
    case RunStatus::completed: return "completed";
    case RunStatus::terminated: return "terminated";
    case RunStatus::failed: return "failed";
  }
  return "running";
}

bool is_terminal(RunStatus s) {
  return s == RunStatus::completed || s == RunStatus::terminated || s == RunStatus::failed;
}

std::string to_string(SteerAction a) {
  switch (a) {
    case SteerAction::interject: return "interject";
    case SteerAction::terminate: return "terminate";
    case SteerAction::resume: return "resume";
  }
  return "interject";
}

SteerAction steer_action_from_string(std::string_view s) {
  if (s == "interject") return SteerAction::interject;
  if (s == "terminate") return SteerAction::terminate;
  if (s == "resume") return SteerAction::resume;
  throw Error(Errc::invalid_argument, "unknown steering action '" + std::string(s) + "'");
}

SnapshotView snapshot_view_from_string(std::string_view s) {
  if (s == "record") return SnapshotView::record;
  if (s == "graph") return SnapshotView::graph;
  if (s == "trace") return SnapshotView::trace;
  if (s == "features") return SnapshotView::features;
  throw Error(Errc::invalid_argument, "unknown view '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Config

RunConfig parse_run_config(const json& j, const RunConfig& defaults) {
  RunConfig c = defaults;
  if (j.is_null()) return c;
  if (!j.is_object()) throw ConfigError({ConfigError::Field{"config", "must be an object"}});

  std::vector<ConfigError::Field> bad;
  auto collect = [&](auto&& step) {
    try {
      step();
    } catch (const ConfigError& e) {
      bad.insert(bad.end(), e.fields().begin(), e.fields().end());
    }
  };
  collect([&] { c.params = merge_params(c.params, j); });
  collect([&] { c.params = merge_params(c.params, j.value("params", json::object())); });
  collect([&] { c.loop = merge_loop_config(c.loop, j.value("loop", json::object())); });
  collect([&] {
    c.more_thinking = merge_more_thinking(c.more_thinking, j.value("more_thinking", json::object()));
  });
  collect([&] {
    const auto esc = j.value("escalation", json::object());
    try {
      c.escalation.high_mean_threshold = esc.value("high_mean_threshold", c.escalation.high_mean_threshold);
      c.escalation.oscillation_threshold = esc.value("oscillation_threshold", c.escalation.oscillation_threshold);
      c.escalation.amplitude_eps = esc.value("amplitude_eps", c.escalation.amplitude_eps);
      c.pause_on_escalation = esc.value("pause_on_escalation", c.pause_on_escalation);
      c.pause_on_escalation = j.value("pause_on_escalation", c.pause_on_escalation);
    } catch (const json::exception&) {
      throw ConfigError({ConfigError::Field{"escalation", "wrong type"}});
    }
  });
  if (!bad.empty()) throw ConfigError(std::move(bad));

  collect([&] { validate(c.params); });
  collect([&] { validate(c.loop); });
  collect([&] { validate(c.more_thinking); });
  if (c.escalation.amplitude_eps < 0) bad.push_back({"escalation.amplitude_eps", "must be >= 0"});
  if (c.escalation.oscillation_threshold < 1)
    bad.push_back({"escalation.oscillation_threshold", "must be >= 1"});
  if (!bad.empty()) throw ConfigError(std::move(bad));
  return c;
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"params", c.params},
           {"loop", c.loop},
           {"more_thinking", c.more_thinking},
           {"escalation",
            {{"high_mean_threshold", c.escalation.high_mean_threshold},
             {"oscillation_threshold", c.escalation.oscillation_threshold},
             {"amplitude_eps", c.escalation.amplitude_eps},
             {"pause_on_escalation", c.pause_on_escalation}}}};
}

// ---------------------------------------------------------------------------
// Records

void to_json(json& j, const RunRecord& r) {
  j = json{{"schema_version", kSchemaVersion},
           {"run_id", r.run_id},
           {"question", r.question},
           {"mode", to_string(r.mode)},
           {"config", r.config},
           {"status", to_string(r.status)},
           {"answer", r.answer ? json(*r.answer) : json(nullptr)},
           {"error", r.error ? json(*r.error) : json(nullptr)},
           {"created_at_ms", r.created_at_ms},
           {"updated_at_ms", r.updated_at_ms},
           {"event_count", r.event_count}};
}

void apply_event(RunRecord& r, const RunEvent& e) {
  const auto& p = e.payload;
  r.run_id = e.run_id;
  r.updated_at_ms = e.wall_time_ms;
  r.event_count = e.seq + 1;
  switch (e.kind) {
    case EventKind::created:
      r.question = p.value("question", std::string{});
      r.mode = run_mode_from_string(p.value("mode", std::string("single")));
      r.config = p.value("config", json::object());
      r.status = RunStatus::running;
      r.created_at_ms = e.wall_time_ms;
      break;
    case EventKind::escalation:
      if (p.value("paused", false) && r.status == RunStatus::running) r.status = RunStatus::awaiting_user;
      break;
    case EventKind::resume:
      if (r.status == RunStatus::awaiting_user || r.status == RunStatus::terminated) {
        r.status = RunStatus::running;
        r.error.reset();
      }
      break;
    case EventKind::terminate:
      if (p.value("scope", std::string{}).empty() && !is_terminal(r.status)) r.status = RunStatus::terminated;
      break;
    case EventKind::answer:
      r.status = RunStatus::completed;
      r.answer = p.value("answer", std::string{});
      break;
    case EventKind::failure:
      if (p.value("fatal", true)) {
        r.status = RunStatus::failed;
        r.error = p.value("message", std::string{});
      }
      break;
    default:
      break;
  }
}

RunRecord fold_record(std::span<const RunEvent> events) {
  RunRecord r;
  for (const auto& e : events) apply_event(r, e);
  return r;
}

SteeringCommand steering_command_from_json(const std::string& run_id, const json& j) {
  if (!j.is_object()) throw Error(Errc::invalid_argument, "steering command must be a JSON object");
  SteeringCommand c;
  c.run_id = run_id;
  if (!j.contains("action") || !j["action"].is_string())
    throw Error(Errc::invalid_argument, "steering command needs an 'action'");
  c.action = steer_action_from_string(j["action"].get<std::string>());
  if (auto it = j.find("channel_id"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw Error(Errc::invalid_argument, "channel_id must be a string");
    if (!it->get<std::string>().empty()) c.channel_id = it->get<std::string>();
  }
  if (auto it = j.find("message"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw Error(Errc::invalid_argument, "message must be a string");
    c.message = it->get<std::string>();
  }
  return c;
}

// ---------------------------------------------------------------------------
// Manager

struct RunManager::Entry {
  std::string run_id;
  std::string question;
  RunMode mode = RunMode::single;
  RunConfig config;
  std::shared_ptr<RunContext> ctx;

  mutable std::mutex mutex;
  mutable std::condition_variable idle;
  RunRecord record;
  bool busy = false;
  int epoch = 0;
  std::thread executor;

  std::mutex steer_mutex;
  std::ofstream log;
};

namespace {

RunContextOptions context_options(RunMode mode, const RunConfig& config) {
  RunContextOptions o;
  o.call_budget = config.loop.call_budget * (mode == RunMode::more_thinking ? config.more_thinking.M : 1);
  o.escalation_check = make_escalation_check(config.escalation);
  o.pause_on_escalation = config.pause_on_escalation;
  return o;
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(Errc::invalid_config, "cannot write " + tmp.string());
    out << content;
  }
  std::filesystem::rename(tmp, path);
}

std::string format_run_id(std::uint64_t n) {
  std::string digits = std::to_string(n);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return "run-" + digits;
}

}  // namespace

RunManager::RunManager(std::shared_ptr<ModelBackend> backend, Options options)
    : backend_(std::move(backend)), options_(std::move(options)), gateway_(backend_, options_.gateway) {
  if (!options_.data_dir.empty()) {
    std::filesystem::create_directories(options_.data_dir / "runs");
    load();
  }
}

RunManager::~RunManager() {
  std::vector<std::shared_ptr<Entry>> entries;
  {
    std::lock_guard lock(mutex_);
    for (auto& [_, e] : runs_) entries.push_back(e);
  }
  for (auto& e : entries) e->ctx->abort();
  for (auto& e : entries)
    if (e->executor.joinable()) e->executor.join();
}

std::filesystem::path RunManager::log_path(const std::string& run_id) const {
  return options_.data_dir / "runs" / (run_id + ".jsonl");
}

void RunManager::write_index_locked() const {
  if (options_.data_dir.empty()) return;
  json runs = json::array();
  for (const auto& [id, _] : runs_) runs.push_back(id);
  write_atomically(options_.data_dir / "index.json",
                   json{{"schema_version", kSchemaVersion}, {"next_id", next_id_}, {"runs", runs}}.dump(2));
}

std::shared_ptr<RunManager::Entry> RunManager::open_entry(const std::string& run_id,
                                                          const std::string& question, RunMode mode,
                                                          const RunConfig& config,
                                                          std::vector<RunEvent> history) {
  auto entry = std::make_shared<Entry>();
  entry->run_id = run_id;
  entry->question = question;
  entry->mode = mode;
  entry->config = config;
  entry->record = fold_record(history);
  bool was_terminated = false;
  for (const auto& e : history) {
    if (e.kind == EventKind::terminate && e.payload.value("scope", std::string{}).empty()) was_terminated = true;
    if (e.kind == EventKind::resume && was_terminated) {
      ++entry->epoch;
      was_terminated = false;
    }
  }
  entry->ctx = std::make_shared<RunContext>(run_id, context_options(mode, config), std::move(history));
  if (!options_.data_dir.empty()) {
    entry->log.open(log_path(run_id), std::ios::app);
    if (!entry->log) throw Error(Errc::invalid_config, "cannot open run log for " + run_id);
  }
  Entry* raw = entry.get();
  entry->ctx->add_observer([raw](const RunEvent& event) {
    if (raw->log.is_open()) {
      raw->log << json(event).dump() << '\n';
      raw->log.flush();
    }
    std::lock_guard lock(raw->mutex);
    apply_event(raw->record, event);
    raw->idle.notify_all();
  });
  return entry;
}

void RunManager::load() {
  const auto index_path = options_.data_dir / "index.json";
  std::vector<std::string> ids;
  if (std::filesystem::exists(index_path)) {
    std::ifstream in(index_path);
    try {
      const auto index = json::parse(in);
      next_id_ = index.value("next_id", std::uint64_t{1});
      ids = index.value("runs", std::vector<std::string>{});
    } catch (const json::exception& e) {
      throw Error(Errc::parse_error, "corrupt run index: " + std::string(e.what()));
    }
  }
  for (const auto& entry : std::filesystem::directory_iterator(options_.data_dir / "runs")) {
    if (entry.path().extension() != ".jsonl") continue;
    const auto id = entry.path().stem().string();
    if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
  }
  std::sort(ids.begin(), ids.end());

  for (const auto& id : ids) {
    std::vector<RunEvent> history;
    std::ifstream in(log_path(id));
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      try {
        history.push_back(json::parse(line).get<RunEvent>());
      } catch (const json::exception&) {
        break;  // torn final write
      }
    }
    if (history.empty()) continue;
    const RunRecord folded = fold_record(history);
    RunConfig config;
    try {
      config = parse_run_config(folded.config, options_.defaults);
    } catch (const ConfigError&) {
      config = options_.defaults;
    }
    auto e = open_entry(id, folded.question, folded.mode, config, std::move(history));
    // Runs cut off by a restart are marked terminated so they can be resumed.
    if (!is_terminal(e->record.status))
      e->ctx->emit("", EventKind::terminate, json{{"scope", ""}, {"reason", "interrupted by service restart"}});
    runs_[id] = e;
    if (id.rfind("run-", 0) == 0) {
      try {
        next_id_ = std::max<std::uint64_t>(next_id_, std::stoull(id.substr(4)) + 1);
      } catch (const std::exception&) {
      }
    }
  }
  write_index_locked();
}

RunRecord RunManager::create_run(const std::string& question, RunMode mode, const json& config) {
  if (trim(question).empty()) throw Error(Errc::empty_question, "question is empty");
  const RunConfig parsed = parse_run_config(config, options_.defaults);

  std::shared_ptr<Entry> entry;
  {
    std::lock_guard lock(mutex_);
    const auto id = format_run_id(next_id_++);
    entry = open_entry(id, question, mode, parsed, {});
    runs_[id] = entry;
    write_index_locked();
  }
  entry->ctx->emit("", EventKind::created,
                   json{{"question", question}, {"mode", to_string(mode)}, {"config", parsed}});
  start(entry, 0);
  std::lock_guard lock(entry->mutex);
  return entry->record;
}

void RunManager::start(const std::shared_ptr<Entry>& entry, int epoch) {
  {
    std::lock_guard lock(entry->mutex);
    entry->busy = true;
  }
  entry->executor = std::thread([this, entry, epoch] { execute(entry, epoch); });
}

void RunManager::execute(const std::shared_ptr<Entry>& entry, int epoch) {
  auto& ctx = *entry->ctx;
  const std::string suffix = epoch > 0 ? "-r" + std::to_string(epoch) : "";
  auto fail = [&](const std::string& code, const std::string& message) {
    try {
      ctx.emit("", EventKind::failure, json{{"error", code}, {"message", message}, {"fatal", true}});
    } catch (const Error&) {
    }
  };
  try {
    CognitiveLoop loop(gateway_, entry->config.loop);
    if (entry->mode == RunMode::single) {
      loop.run_channel(entry->question, entry->config.params, ctx, "c0" + suffix);
    } else {
      more_thinking(entry->question, entry->config.params, entry->config.more_thinking, loop, ctx, suffix);
    }
  } catch (const Error& e) {
    if (e.code() != Errc::cancelled) {
      fail(std::string(to_string(e.code())), e.what());
    } else if (!ctx.run_terminated() && !ctx.aborted()) {
      // Scoped terminates reached every root channel.
      ctx.terminate(std::nullopt);
    }
  } catch (const std::exception& e) {
    fail("Internal", e.what());
  }
  std::lock_guard lock(entry->mutex);
  entry->busy = false;
  entry->idle.notify_all();
}

std::shared_ptr<RunManager::Entry> RunManager::find(const std::string& run_id) const {
  std::lock_guard lock(mutex_);
  auto it = runs_.find(run_id);
  if (it == runs_.end()) throw Error(Errc::unknown_run, "unknown run '" + run_id + "'");
  return it->second;
}

std::vector<RunRecord> RunManager::list_runs() const {
  std::vector<std::shared_ptr<Entry>> entries;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [_, e] : runs_) entries.push_back(e);
  }
  std::vector<RunRecord> out;
  for (const auto& e : entries) {
    std::lock_guard lock(e->mutex);
    out.push_back(e->record);
  }
  return out;
}

RunRecord RunManager::get_run(const std::string& run_id) const {
  auto e = find(run_id);
  std::lock_guard lock(e->mutex);
  return e->record;
}

std::vector<RunEvent> RunManager::events(const std::string& run_id, std::uint64_t from_seq) const {
  return find(run_id)->ctx->events(from_seq);
}

bool RunManager::wait_for_events(const std::string& run_id, std::uint64_t from_seq,
                                 std::chrono::milliseconds timeout) const {
  return find(run_id)->ctx->wait_for_events(from_seq, timeout);
}

std::shared_ptr<RunContext> RunManager::context(const std::string& run_id) const {
  return find(run_id)->ctx;
}

json RunManager::steer(const SteeringCommand& command) {
  auto entry = find(command.run_id);
  std::lock_guard steer_lock(entry->steer_mutex);
  auto& ctx = *entry->ctx;
  if (command.channel_id && !ctx.has_channel(*command.channel_id))
    throw Error(Errc::unknown_channel, "unknown channel '" + *command.channel_id + "'");

  RunStatus status;
  {
    std::lock_guard lock(entry->mutex);
    status = entry->record.status;
  }
  RunEvent event;
  switch (command.action) {
    case SteerAction::interject:
      if (!command.message || trim(*command.message).empty())
        throw Error(Errc::invalid_argument, "interject needs a non-empty message");
      if (is_terminal(status))
        throw Error(Errc::illegal_state, "cannot interject on a " + to_string(status) + " run");
      event = ctx.interject(command.channel_id, *command.message);
      break;
    case SteerAction::terminate:
      if (is_terminal(status))
        throw Error(Errc::illegal_state, "cannot terminate a " + to_string(status) + " run");
      event = ctx.terminate(command.channel_id);
      break;
    case SteerAction::resume:
      if (status == RunStatus::awaiting_user) {
        event = ctx.resume(command.channel_id, command.message);
      } else if (status == RunStatus::terminated) {
        if (entry->executor.joinable()) entry->executor.join();
        event = ctx.resume(command.channel_id, command.message);
        start(entry, ++entry->epoch);
      } else {
        throw Error(Errc::illegal_state, "cannot resume a " + to_string(status) + " run");
      }
      break;
  }
  std::lock_guard lock(entry->mutex);
  return json{{"schema_version", kSchemaVersion},
              {"run_id", command.run_id},
              {"seq", event.seq},
              {"action", to_string(command.action)},
              {"channel_id", command.channel_id ? json(*command.channel_id) : json(nullptr)},
              {"status", to_string(entry->record.status)}};
}

json RunManager::snapshot(const std::string& run_id, SnapshotView view) const {
  auto entry = find(run_id);
  if (view == SnapshotView::record) {
    std::lock_guard lock(entry->mutex);
    return entry->record;
  }
  const auto log = entry->ctx->events();
  switch (view) {
    case SnapshotView::graph:
      for (auto it = log.rbegin(); it != log.rend(); ++it) {
        if (it->kind == EventKind::graph && it->payload.contains("graph")) {
          json out = it->payload["graph"];
          out["run_id"] = run_id;
          return out;
        }
      }
      throw Error(Errc::view_unavailable, "run '" + run_id + "' has no graph yet");
    case SnapshotView::trace: {
      json out = extract_trace(log);
      out["run_id"] = run_id;
      return out;
    }
    case SnapshotView::features: {
      const auto trace = extract_trace(log);
      const auto features = compute_features(trace, entry->config.escalation.amplitude_eps);
      const auto cls = classify_trace(features, entry->config.escalation);
      return json{{"schema_version", kSchemaVersion},
                  {"run_id", run_id},
                  {"features", features},
                  {"regime", to_string(cls.regime)},
                  {"escalate", cls.escalate}};
    }
    case SnapshotView::record:
      break;
  }
  return json::object();
}

RunRecord RunManager::wait_until_idle(const std::string& run_id, std::chrono::milliseconds timeout) const {
  auto entry = find(run_id);
  std::unique_lock lock(entry->mutex);
  entry->idle.wait_for(lock, timeout, [&] {
    return !entry->busy || entry->record.status == RunStatus::awaiting_user;
  });
  return entry->record;
}

}  // namespace clio
