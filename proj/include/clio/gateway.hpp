#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <string>
#include <type_traits>
#include <vector>

#include "clio/error.hpp"
#include "clio/model.hpp"
#include "clio/run_context.hpp"

namespace clio {

struct GatewayOptions {
  int max_retries = 3;
  std::chrono::milliseconds backoff_base{250};
  double backoff_factor = 2.0;
  std::chrono::milliseconds backoff_cap{8000};
  int max_in_flight = 8;
};

/// Who is calling: the run (for logging, steering and budget) and the
/// channel. `tally`, when set, is incremented once per completed call.
struct CallSite {
  RunContext* run = nullptr;
  std::string channel_id;
  int* tally = nullptr;
  /// Unmetered calls are logged but not charged to the run's call budget.
  bool metered = true;
};

/// The only path from the engine to a provider.
class Gateway {
 public:
  explicit Gateway(std::shared_ptr<ModelBackend> backend, GatewayOptions options = {});

  /// Checkpoint + budget charge (when attached to a run), bounded retries on
  /// transport errors, then a model_call event.
  ModelResponse complete(const ModelRequest& request, const CallSite& site = {});

  /// complete() followed by `parse`. If `parse` throws Error(malformed_response)
  /// the model is re-asked once with the parse error; a second failure
  /// propagates.
  template <class Parser>
  auto complete_structured(ModelRequest request, Parser&& parse, const CallSite& site = {})
      -> std::invoke_result_t<Parser&, const ModelResponse&>;

  std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts,
                                     const CallSite& site = {});

  ModelBackend& backend() noexcept { return *backend_; }
  const GatewayOptions& options() const noexcept { return options_; }

  std::uint64_t attempts() const noexcept { return attempts_.load(); }
  std::uint64_t calls() const noexcept { return calls_.load(); }

 private:
  template <class Fn>
  auto with_retries(Fn&& fn) -> decltype(fn());

  class Slot;

  std::shared_ptr<ModelBackend> backend_;
  GatewayOptions options_;

  std::mutex slots_mutex_;
  std::condition_variable slots_cv_;
  int in_flight_ = 0;

  std::atomic<std::uint64_t> attempts_{0};
  std::atomic<std::uint64_t> calls_{0};
};

template <class Parser>
auto Gateway::complete_structured(ModelRequest request, Parser&& parse, const CallSite& site)
    -> std::invoke_result_t<Parser&, const ModelResponse&> {
  request.response_format = ResponseFormat::structured;
  auto first = complete(request, site);
  try {
    return parse(first);
  } catch (const Error& e) {
    if (e.code() != Errc::malformed_response) throw;
    request.messages.push_back({"assistant", first.text});
    request.messages.push_back(
        {"user", std::string("Your previous reply could not be used: ") + e.what() +
                     "\nReply again using exactly the requested format."});
  }
  auto second = complete(request, site);
  return parse(second);
}

}  // namespace clio
