#include "clio/run_context.hpp"

#include <algorithm>

#include "clio/error.hpp"

namespace clio {

namespace {

std::int64_t wall_clock_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

bool synthesis_channel(std::string_view channel, std::string& parent) {
  constexpr std::string_view suffix = ".syn";
  if (channel.size() <= suffix.size() || !channel.ends_with(suffix)) return false;
  parent = std::string(channel.substr(0, channel.size() - suffix.size()));
  return true;
}

}  // namespace

RunContext::RunContext(std::string run_id, RunContextOptions options, std::vector<RunEvent> history)
    : run_id_(std::move(run_id)),
      options_(std::move(options)),
      started_(std::chrono::steady_clock::now()) {
  std::lock_guard lock(mutex_);
  for (auto& event : history) {
    clock_offset_ = std::max(clock_offset_, event.timestamp + 1);
    log_.push_back(std::move(event));
    apply_locked(log_.back());
    // Budget is per execution epoch: calls logged since the last resume.
    if (log_.back().kind == EventKind::model_call &&
        log_.back().payload.value("purpose", std::string{}) != "embed" &&
        log_.back().payload.value("metered", true))
      ++calls_;
  }
}

void RunContext::add_observer(Observer observer) {
  std::lock_guard lock(mutex_);
  observers_.push_back(std::move(observer));
}

std::int64_t RunContext::now() const {
  using namespace std::chrono;
  return clock_offset_ +
         duration_cast<microseconds>(steady_clock::now() - started_).count();
}

RunEvent RunContext::emit(const std::string& channel_id, EventKind kind, json payload) {
  std::lock_guard lock(mutex_);
  if (aborted_) throw Error(Errc::cancelled, "run was abandoned");
  if (!is_control_event(kind)) {
    if (run_terminated_ || (!channel_id.empty() && terminated_locked(channel_id)))
      throw Error(Errc::cancelled, "scope '" + channel_id + "' was terminated");
  }
  auto event = append_locked(channel_id, kind, std::move(payload));
  if (kind == EventKind::uncertainty) evaluate_escalation_locked();
  return event;
}

RunEvent RunContext::append_locked(const std::string& channel_id, EventKind kind, json payload) {
  RunEvent event;
  event.seq = log_.size();
  event.run_id = run_id_;
  event.channel_id = channel_id;
  event.kind = kind;
  event.payload = std::move(payload);
  event.timestamp = std::max(now(), log_.empty() ? 0 : log_.back().timestamp + 1);
  event.wall_time_ms = wall_clock_ms();
  log_.push_back(event);
  apply_locked(log_.back());
  for (const auto& observer : observers_) observer(log_.back());
  changed_.notify_all();
  return event;
}

void RunContext::apply_locked(const RunEvent& event) {
  const auto& p = event.payload;
  auto scope = [&] { return p.value("scope", std::string{}); };
  switch (event.kind) {
    case EventKind::spawn:
      channels_.push_back(event.channel_id);
      break;
    case EventKind::interjection:
      guidance_.push_back({scope(), p.value("message", std::string{})});
      break;
    case EventKind::terminate:
      if (scope().empty()) {
        run_terminated_ = true;
      } else {
        terminated_scopes_.push_back(scope());
      }
      break;
    case EventKind::resume:
      run_terminated_ = false;
      terminated_scopes_.clear();
      paused_ = false;
      calls_ = 0;
      if (auto m = p.value("message", std::string{}); !m.empty()) guidance_.push_back({scope(), m});
      break;
    case EventKind::escalation:
      if (p.value("paused", false)) paused_ = true;
      break;
    case EventKind::uncertainty: {
      OpenUncertainty u;
      u.id = p.value("id", std::string{});
      u.channel_id = event.channel_id;
      u.description = p.value("description", std::string{});
      u.level = p.value("level", 0.0);
      for (const auto& ref : p.value("addressed_prior_ids", std::vector<std::string>{})) {
        for (auto& prior : uncertainties_)
          if (prior.id == ref) prior.addressed = true;
      }
      if (u.id.size() > 1 && u.id[0] == 'u') {
        try {
          uncertainty_counter_ = std::max<std::size_t>(uncertainty_counter_, std::stoul(u.id.substr(1)) + 1);
        } catch (const std::exception&) {
        }
      }
      uncertainties_.push_back(std::move(u));
      break;
    }
    default:
      break;
  }
}

void RunContext::evaluate_escalation_locked() {
  if (!options_.escalation_check) return;
  std::vector<RunEvent> trace;
  for (const auto& e : log_)
    if (e.kind == EventKind::uncertainty) trace.push_back(e);
  auto verdict = options_.escalation_check(trace);
  const bool now_escalated = verdict.has_value();
  if (now_escalated && !escalated_) {
    json payload = *verdict;
    payload["paused"] = options_.pause_on_escalation;
    append_locked("", EventKind::escalation, std::move(payload));
  }
  escalated_ = now_escalated;
}

bool RunContext::terminated_locked(const std::string& channel_id) const {
  if (run_terminated_) return true;
  return std::any_of(terminated_scopes_.begin(), terminated_scopes_.end(),
                     [&](const std::string& scope) { return in_scope(channel_id, scope); });
}

void RunContext::checkpoint(const std::string& channel_id) {
  std::unique_lock lock(mutex_);
  for (;;) {
    if (aborted_) throw Error(Errc::cancelled, "run was abandoned");
    if (terminated_locked(channel_id))
      throw Error(Errc::cancelled, "scope '" + channel_id + "' was terminated");
    if (!paused_) return;
    changed_.wait(lock);
  }
}

void RunContext::charge_call() {
  int current = calls_.load();
  do {
    if (current >= options_.call_budget)
      throw Error(Errc::budget_exceeded, "call budget of " +
                                             std::to_string(options_.call_budget) +
                                             " exhausted");
  } while (!calls_.compare_exchange_weak(current, current + 1));
}

RunEvent RunContext::interject(const std::optional<std::string>& channel_id,
                               const std::string& message) {
  std::lock_guard lock(mutex_);
  return append_locked(channel_id.value_or(""), EventKind::interjection,
                       json{{"scope", channel_id.value_or("")}, {"message", message}});
}

RunEvent RunContext::terminate(const std::optional<std::string>& channel_id) {
  std::lock_guard lock(mutex_);
  return append_locked(channel_id.value_or(""), EventKind::terminate,
                       json{{"scope", channel_id.value_or("")}});
}

RunEvent RunContext::resume(const std::optional<std::string>& channel_id,
                            const std::optional<std::string>& message) {
  std::lock_guard lock(mutex_);
  return append_locked(channel_id.value_or(""), EventKind::resume,
                       json{{"scope", channel_id.value_or("")},
                            {"message", message.value_or("")}});
}

bool RunContext::terminated(const std::string& channel_id) const {
  std::lock_guard lock(mutex_);
  return terminated_locked(channel_id);
}

bool RunContext::run_terminated() const {
  std::lock_guard lock(mutex_);
  return run_terminated_;
}

bool RunContext::paused() const {
  std::lock_guard lock(mutex_);
  return paused_;
}

std::vector<std::string> RunContext::guidance_for(const std::string& channel_id) const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& g : guidance_)
    if (in_scope(channel_id, g.scope)) out.push_back(g.message);
  return out;
}

std::vector<OpenUncertainty> RunContext::open_uncertainties(const std::string& channel_id) const {
  std::lock_guard lock(mutex_);
  std::string syn_parent;
  const bool is_syn = synthesis_channel(channel_id, syn_parent);
  std::vector<OpenUncertainty> out;
  for (const auto& u : uncertainties_) {
    if (u.addressed) continue;
    const bool lineage = in_scope(channel_id, u.channel_id);
    const bool below_parent = is_syn && in_scope(u.channel_id, syn_parent);
    if (lineage || below_parent) out.push_back(u);
  }
  return out;
}

std::string RunContext::next_uncertainty_id() {
  std::lock_guard lock(mutex_);
  return "u" + std::to_string(uncertainty_counter_++);
}

bool RunContext::has_uncertainty(const std::string& id) const {
  std::lock_guard lock(mutex_);
  return std::any_of(uncertainties_.begin(), uncertainties_.end(),
                     [&](const auto& u) { return u.id == id; });
}

bool RunContext::has_channel(const std::string& channel_id) const {
  std::lock_guard lock(mutex_);
  return std::find(channels_.begin(), channels_.end(), channel_id) != channels_.end();
}

std::vector<RunEvent> RunContext::events(std::uint64_t from_seq) const {
  std::lock_guard lock(mutex_);
  if (from_seq >= log_.size()) return {};
  return {log_.begin() + static_cast<std::ptrdiff_t>(from_seq), log_.end()};
}

std::uint64_t RunContext::next_seq() const {
  std::lock_guard lock(mutex_);
  return log_.size();
}

bool RunContext::wait_for_events(std::uint64_t from_seq, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  return changed_.wait_for(lock, timeout, [&] { return log_.size() > from_seq; });
}

void RunContext::abort() {
  {
    std::lock_guard lock(mutex_);
    aborted_ = true;
  }
  changed_.notify_all();
}

bool RunContext::aborted() const {
  std::lock_guard lock(mutex_);
  return aborted_;
}

void RunContext::notify_all() const {
  changed_.notify_all();
}

}  // namespace clio
