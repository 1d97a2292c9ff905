#include "clio/http_service.hpp"

#include <httplib.h>

#include "clio/error.hpp"

namespace clio {

ListenAddress parse_listen(std::string_view text) {
  ListenAddress out;
  std::string s = trim(text);
  if (s.empty()) return out;
  std::string port_text = s;
  if (auto colon = s.rfind(':'); colon != std::string::npos) {
    if (colon > 0) out.host = s.substr(0, colon);
    port_text = s.substr(colon + 1);
  }
  try {
    std::size_t used = 0;
    const int port = std::stoi(port_text, &used);
    if (used != port_text.size() || port < 0 || port > 65535) throw std::out_of_range("port");
    out.port = port;
  } catch (const std::exception&) {
    throw Error(Errc::invalid_argument, "bad listen address '" + s + "'");
  }
  return out;
}

std::pair<int, json> error_response(const Error& e) {
  json body{{"schema_version", kSchemaVersion},
            {"error", std::string(to_string(e.code()))},
            {"message", e.what()}};
  if (const auto* ce = dynamic_cast<const ConfigError*>(&e)) {
    json fields = json::array();
    for (const auto& f : ce->fields()) fields.push_back({{"field", f.name}, {"message", f.message}});
    body["fields"] = fields;
  }
  int status = 500;
  switch (e.code()) {
    case Errc::invalid_config:
    case Errc::invalid_argument:
    case Errc::empty_question:
    case Errc::parse_error:
      status = 400;
      break;
    case Errc::unknown_run:
    case Errc::unknown_channel:
      status = 404;
      break;
    case Errc::illegal_state:
    case Errc::view_unavailable:
      status = 409;
      break;
    case Errc::provider_unavailable:
    case Errc::transport:
      status = 502;
      break;
    default:
      break;
  }
  return {status, body};
}

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const Error& e) {
  auto [status, body] = error_response(e);
  send_json(res, status, body);
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("request body is not JSON: ") + e.what());
  }
}

std::uint64_t parse_seq(const std::string& text) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument("seq");
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::invalid_argument, "bad sequence number '" + text + "'");
  }
}

std::string sse_frame(const RunEvent& e) {
  std::string out = "id: " + std::to_string(e.seq) + "\n";
  out += "event: ";
  out += to_string(e.kind);
  out += "\ndata: " + json(e).dump() + "\n\n";
  return out;
}

}  // namespace

struct HttpService::Impl {
  RunManager& manager;
  HttpOptions options;
  httplib::Server server;
  std::thread thread;
  std::atomic<bool> stopping{false};
  bool bound = false;

  Impl(RunManager& m, HttpOptions o) : manager(m), options(std::move(o)) { routes(); }

  template <class F>
  auto guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const Error& e) {
        send_error(res, e);
      } catch (const std::exception& e) {
        send_json(res, 500,
                  json{{"schema_version", kSchemaVersion}, {"error", "Internal"}, {"message", e.what()}});
      }
    };
  }

  void routes() {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type, Last-Event-ID"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, json{{"schema_version", kSchemaVersion}, {"status", "ok"}});
    });

    server.Post("/runs", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      if (!body.is_object()) throw Error(Errc::invalid_argument, "request body must be an object");
      const auto q = body.find("question");
      if (q == body.end() || !q->is_string()) throw Error(Errc::empty_question, "question is required");
      RunMode mode = RunMode::single;
      if (auto m = body.find("mode"); m != body.end() && !m->is_null()) {
        if (!m->is_string()) throw ConfigError({ConfigError::Field{"mode", "must be a string"}});
        mode = run_mode_from_string(m->get<std::string>());
      }
      const json config = body.value("config", json::object());
      send_json(res, 201, manager.create_run(q->get<std::string>(), mode, config));
    }));

    server.Get("/runs", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, json{{"schema_version", kSchemaVersion}, {"runs", manager.list_runs()}});
    }));

    server.Get(R"(/runs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, manager.get_run(req.matches[1]));
    }));

    server.Post(R"(/runs/([^/]+)/steer)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto cmd = steering_command_from_json(req.matches[1], parse_body(req));
      send_json(res, 200, manager.steer(cmd));
    }));

    for (const char* view : {"graph", "trace", "features"}) {
      server.Get(std::string(R"(/runs/([^/]+)/)") + view,
                 guarded([this, view](const httplib::Request& req, httplib::Response& res) {
                   send_json(res, 200, manager.snapshot(req.matches[1], snapshot_view_from_string(view)));
                 }));
    }

    server.Get(R"(/runs/([^/]+)/events)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      stream_events(req, res);
    }));

    if (!options.ui_dir.empty()) server.set_mount_point("/", options.ui_dir.string());
  }

  void stream_events(const httplib::Request& req, httplib::Response& res) {
    const std::string run_id = req.matches[1];
    std::uint64_t from = 0;
    if (req.has_param("from_seq")) from = parse_seq(req.get_param_value("from_seq"));
    if (req.has_header("Last-Event-ID"))
      from = std::max(from, parse_seq(req.get_header_value("Last-Event-ID")) + 1);
    manager.get_run(run_id);  // UnknownRun before any streaming starts

    if (req.get_param_value("format") == "json") {
      send_json(res, 200,
                json{{"schema_version", kSchemaVersion}, {"run_id", run_id}, {"events", manager.events(run_id, from)}});
      return;
    }

    res.set_header("Cache-Control", "no-cache");
    auto next = std::make_shared<std::uint64_t>(from);
    const auto keepalive = options.keepalive;
    res.set_chunked_content_provider(
        "text/event-stream", [this, run_id, next, keepalive](std::size_t, httplib::DataSink& sink) {
          auto idle = std::chrono::milliseconds(0);
          constexpr auto poll = std::chrono::milliseconds(200);
          while (!stopping && sink.is_writable()) {
            RunRecord record;
            std::vector<RunEvent> batch;
            try {
              record = manager.get_run(run_id);
              batch = manager.events(run_id, *next);
            } catch (const Error&) {
              sink.done();
              return true;
            }
            if (!batch.empty()) {
              for (const auto& e : batch) {
                const auto frame = sse_frame(e);
                if (!sink.write(frame.data(), frame.size())) return false;
                *next = e.seq + 1;
              }
              return true;
            }
            if (is_terminal(record.status) && *next >= record.event_count) {
              sink.done();
              return true;
            }
            manager.wait_for_events(run_id, *next, poll);
            idle += poll;
            if (idle >= keepalive) {
              static constexpr std::string_view ping = ": keepalive\n\n";
              if (!sink.write(ping.data(), ping.size())) return false;
              return true;
            }
          }
          return false;
        });
  }
};

HttpService::HttpService(RunManager& manager, HttpOptions options)
    : impl_(std::make_unique<Impl>(manager, std::move(options))) {}

HttpService::~HttpService() { stop(); }

int HttpService::bind() {
  if (impl_->bound) return port_;
  const auto& l = impl_->options.listen;
  if (l.port == 0) {
    port_ = impl_->server.bind_to_any_port(l.host);
  } else {
    port_ = impl_->server.bind_to_port(l.host, l.port) ? l.port : -1;
  }
  if (port_ < 0)
    throw Error(Errc::invalid_argument, "cannot listen on " + l.host + ":" + std::to_string(l.port));
  impl_->bound = true;
  return port_;
}

void HttpService::serve() {
  bind();
  impl_->server.listen_after_bind();
}

int HttpService::start() {
  bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void HttpService::stop() {
  if (!impl_) return;
  impl_->stopping = true;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace clio
