#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <memory>
#include <string>
#include <thread>

#include "clio/run_manager.hpp"

namespace clio {

struct ListenAddress {
  std::string host = "127.0.0.1";
  int port = 8080;
};

/// "host:port", ":port" or "port". Throws Error(invalid_argument).
ListenAddress parse_listen(std::string_view text);

struct HttpOptions {
  ListenAddress listen;
  /// Served at "/" when set (the dashboard bundle).
  std::filesystem::path ui_dir;
  /// Idle interval between SSE keepalive comments.
  std::chrono::milliseconds keepalive{15000};
};

/// JSON body for an error response and the HTTP status it maps to.
std::pair<int, json> error_response(const Error& e);

/// JSON API over a RunManager:
///   POST /runs                      {question, mode?, config?} -> 201 RunRecord
///   GET  /runs                      {schema_version, runs: [RunRecord]}
///   GET  /runs/{id}                 RunRecord
///   GET  /runs/{id}/events?from_seq=N[&format=json]
///        text/event-stream ("id: seq", "event: kind", "data: RunEvent"),
///        closed once the run is terminal and fully delivered. Last-Event-ID
///        is honoured on reconnect.
///   POST /runs/{id}/steer           {action, channel_id?, message?} -> ack
///   GET  /runs/{id}/graph|trace|features
///   GET  /healthz
class HttpService {
 public:
  HttpService(RunManager& manager, HttpOptions options);
  ~HttpService();

  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  /// Binds the socket; port 0 picks a free port. Returns the bound port.
  int bind();
  /// Serves until stop(). Binds first if needed.
  void serve();
  /// bind() + serve() on a background thread.
  int start();
  void stop();

  int port() const noexcept { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = -1;
};

}  // namespace clio
