// clio: command-line front end (run, bench, features, serve, query).

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "clio/bench.hpp"
#include "clio/error.hpp"
#include "clio/graph.hpp"
#include "clio/http_service.hpp"
#include "clio/openai_backend.hpp"
#include "clio/run_manager.hpp"
#include "clio/scripted_backend.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kRunFailures = 1;
constexpr int kInvalidInput = 2;

struct Common {
  std::string fixtures;
  std::string data_dir;
  std::string config_file;
  std::optional<int> b, D, budget, M, f, u, parallel_channels;
  std::optional<double> tau;
  bool pause_on_escalation = false;
};

void add_common(CLI::App* cmd, Common& c, bool engine_flags = true) {
  cmd->add_option("--fixtures", c.fixtures, "Scripted backend: fixture directory or script file");
  cmd->add_option("--data-dir", c.data_dir, "Run log directory (default $CLIO_DATA_DIR or ./clio-data)");
  if (!engine_flags) return;
  cmd->add_option("--config", c.config_file, "Run config JSON file");
  cmd->add_option("--b", c.b, "Branching factor");
  cmd->add_option("--D", c.D, "Maximum depth");
  cmd->add_option("--tau", c.tau, "Confidence threshold");
  cmd->add_option("--budget", c.budget, "Model-call budget per run");
  cmd->add_option("--M", c.M, "More-thinking chains");
  cmd->add_option("--f", c.f, "DRIFT folds");
  cmd->add_option("--u", c.u, "DRIFT follow-ups per fold");
  cmd->add_option("--parallel-channels", c.parallel_channels, "Concurrent child channels");
}

std::filesystem::path data_dir(const Common& c) {
  if (!c.data_dir.empty()) return c.data_dir;
  if (const char* env = std::getenv("CLIO_DATA_DIR"); env && *env) return env;
  return "clio-data";
}

std::shared_ptr<clio::ModelBackend> make_backend(const Common& c) {
  if (!c.fixtures.empty()) {
    auto scripted = std::make_shared<clio::ScriptedBackend>();
    scripted->load_directory(c.fixtures);
    return scripted;
  }
  auto config = clio::OpenAIConfig::from_environment();
  if (!config)
    throw clio::Error(clio::Errc::provider_unavailable,
                      "no model provider: set CLIO_API_BASE/CLIO_MODEL or pass --fixtures");
  return std::make_shared<clio::OpenAIBackend>(*config);
}

clio::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw clio::Error(clio::Errc::invalid_argument, "cannot open " + path);
  try {
    return clio::json::parse(in);
  } catch (const clio::json::exception& e) {
    throw clio::Error(clio::Errc::parse_error, path + ": " + e.what());
  }
}

clio::json build_config(const Common& c) {
  clio::json config = c.config_file.empty() ? clio::json::object() : read_json_file(c.config_file);
  if (!config.is_object()) throw clio::Error(clio::Errc::invalid_argument, "config must be a JSON object");
  auto& params = config["params"];
  if (!params.is_object()) params = clio::json::object();
  if (c.b) params["branching_factor_b"] = *c.b;
  if (c.D) params["max_depth_D"] = *c.D;
  if (c.tau) params["confidence_threshold_tau"] = *c.tau;
  auto& loop = config["loop"];
  if (!loop.is_object()) loop = clio::json::object();
  if (c.budget) loop["budget"] = *c.budget;
  if (c.parallel_channels) loop["max_parallel_channels"] = *c.parallel_channels;
  auto& mt = config["more_thinking"];
  if (!mt.is_object()) mt = clio::json::object();
  if (c.M) mt["M"] = *c.M;
  if (c.f) mt["f"] = *c.f;
  if (c.u) mt["u"] = *c.u;
  if (c.pause_on_escalation) config["pause_on_escalation"] = true;
  return config;
}

clio::RunMode parse_mode(const std::string& s) {
  return clio::run_mode_from_string(s);
}

void write_output(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw clio::Error(clio::Errc::invalid_argument, "cannot write " + path);
  out << content;
}

int report(const clio::Error& e) {
  std::cerr << "clio: " << clio::to_string(e.code()) << ": " << e.what() << "\n";
  switch (e.code()) {
    case clio::Errc::invalid_argument:
    case clio::Errc::invalid_config:
    case clio::Errc::empty_question:
    case clio::Errc::parse_error:
    case clio::Errc::duplicate_id:
    case clio::Errc::unknown_run:
    case clio::Errc::empty_graph:
      return kInvalidInput;
    default:
      return kRunFailures;
  }
}

// --- subcommands -------------------------------------------------------------

int cmd_run(const Common& c, const std::string& question, const std::string& mode, bool show_events) {
  clio::RunManager manager(make_backend(c), {data_dir(c), {}, {}});
  auto created = manager.create_run(question, parse_mode(mode), build_config(c));
  std::cerr << "run " << created.run_id << "\n";
  auto record = manager.wait_until_idle(created.run_id, std::chrono::hours(24));
  if (show_events)
    for (const auto& e : manager.events(created.run_id)) std::cerr << clio::json(e).dump() << "\n";
  if (record.status == clio::RunStatus::awaiting_user) {
    std::cerr << "run paused for review; resume it through `clio serve`\n";
    return kRunFailures;
  }
  if (record.status != clio::RunStatus::completed) {
    std::cerr << "run " << clio::to_string(record.status);
    if (record.error) std::cerr << ": " << *record.error;
    std::cerr << "\n";
    return kRunFailures;
  }
  std::cout << record.answer.value_or("") << "\n";
  return kOk;
}

struct BenchArgs {
  std::string questions;
  std::string mode = "single";
  int k = 1;
  int parallel = 1;
  bool judge = false;
  std::string out = "-";
  std::string csv;
  std::string features_out;
};

int cmd_bench(const Common& c, const BenchArgs& a) {
  const auto questions = clio::load_questions(a.questions);
  clio::BenchOptions options;
  options.mode = parse_mode(a.mode);
  options.config = build_config(c);
  options.k = a.k;
  options.parallelism = a.parallel;
  options.judge = a.judge;
  clio::RunManager manager(make_backend(c), {data_dir(c), {}, {}});
  const auto records = clio::run_benchmark(questions, options, manager);
  const auto acc = clio::accuracy_report(records);
  write_output(a.out, clio::bench_report_json(records, acc, options).dump(2) + "\n");
  if (!a.csv.empty()) write_output(a.csv, clio::accuracy_csv(acc));
  if (!a.features_out.empty()) {
    const auto esc = clio::parse_run_config(options.config).escalation;
    write_output(a.features_out, clio::bench_features_csv(records, esc));
  }
  std::cerr << "accuracy " << acc.total.fraction() << " = " << acc.total.percent() << "\n";
  for (const auto& r : records)
    for (const auto& run : r.runs)
      if (run.error) return kRunFailures;
  return kOk;
}

int cmd_features(const Common& c, const std::vector<std::string>& run_ids, bool all, const std::string& out,
                 bool as_json) {
  // Reading persisted logs needs no provider.
  clio::RunManager manager(std::make_shared<clio::ScriptedBackend>(), {data_dir(c), {}, {}});
  std::vector<std::string> ids = run_ids;
  if (all)
    for (const auto& r : manager.list_runs()) ids.push_back(r.run_id);
  if (ids.empty()) throw clio::Error(clio::Errc::invalid_argument, "pass --run-id or --all");
  if (as_json) {
    clio::json docs = clio::json::array();
    for (const auto& id : ids) docs.push_back(manager.snapshot(id, clio::SnapshotView::features));
    write_output(out, docs.dump(2) + "\n");
    return kOk;
  }
  std::string csv = clio::features_csv_header() + "\n";
  for (const auto& id : ids) {
    const auto trace = clio::extract_trace(manager.events(id));
    if (trace.events.size() < 2) {
      std::cerr << "clio: " << id << ": fewer than two uncertainty events, skipped\n";
      continue;
    }
    const auto f = clio::compute_features(trace);
    csv += clio::features_csv_row(id, trace.outcome, f) + "\n";
  }
  write_output(out, csv);
  return kOk;
}

clio::HttpService* g_service = nullptr;

extern "C" void on_signal(int) {
  if (g_service) g_service->stop();
}

int cmd_serve(const Common& c, std::string listen, const std::string& ui_dir) {
  if (listen.empty()) {
    const char* env = std::getenv("CLIO_LISTEN");
    listen = env && *env ? env : "127.0.0.1:8080";
  }
  clio::RunManager manager(make_backend(c), {data_dir(c), {}, {}});
  clio::HttpOptions options;
  options.listen = clio::parse_listen(listen);
  if (!ui_dir.empty()) {
    options.ui_dir = ui_dir;
  } else if (const char* env = std::getenv("CLIO_UI_DIR"); env && *env) {
    options.ui_dir = env;
  }
  clio::HttpService service(manager, options);
  const int port = service.bind();
  std::cerr << "listening on " << options.listen.host << ":" << port << ", data in " << data_dir(c).string()
            << "\n";
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  service.serve();
  g_service = nullptr;
  return kOk;
}

int cmd_query(const Common& c, const std::string& graph_path, const std::string& question, int folds,
              int follow_ups) {
  auto graph = clio::graph_from_json(read_json_file(graph_path));
  clio::Gateway gateway(make_backend(c));
  if (!graph.clustered()) graph = clio::cluster_graph(std::move(graph));
  if (!graph.summarized()) clio::summarize_communities(graph, question, gateway);
  clio::DriftConfig cfg;
  cfg.folds = folds;
  cfg.follow_ups = follow_ups;
  std::cout << clio::drift_search(question, graph, cfg, gateway) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CLIO: recursive reasoning runs with live steering and uncertainty telemetry"};
  app.require_subcommand(1);
  Common common;

  auto* run = app.add_subcommand("run", "Answer one question");
  std::string question, mode = "single";
  bool show_events = false;
  run->add_option("--question,-q", question, "Question text")->required();
  run->add_option("--mode", mode, "single | more-thinking");
  run->add_flag("--events", show_events, "Print the event log to stderr");
  run->add_flag("--pause-on-escalation", common.pause_on_escalation, "Pause when the trace escalates");
  add_common(run, common);

  auto* bench = app.add_subcommand("bench", "Evaluate a question file");
  BenchArgs bench_args;
  bench->add_option("--questions", bench_args.questions, "JSON Lines question file")->required();
  bench->add_option("--k", bench_args.k, "Runs per question")->check(CLI::PositiveNumber);
  bench->add_option("--mode", bench_args.mode, "single | more-thinking");
  bench->add_option("--parallel", bench_args.parallel, "Runs in flight at once")->check(CLI::PositiveNumber);
  bench->add_flag("--judge", bench_args.judge, "Grade free-response answers with the model");
  bench->add_option("--out", bench_args.out, "Report JSON path (default stdout)");
  bench->add_option("--csv", bench_args.csv, "Accuracy CSV path");
  bench->add_option("--features-out", bench_args.features_out, "Per-run trace features CSV path");
  add_common(bench, common);

  auto* features = app.add_subcommand("features", "Export trace features of stored runs");
  std::vector<std::string> run_ids;
  bool all_runs = false, features_json = false;
  std::string features_out = "-";
  features->add_option("--run-id", run_ids, "Run id (repeatable)");
  features->add_flag("--all", all_runs, "Every stored run");
  features->add_flag("--json", features_json, "Emit the features view JSON instead of CSV");
  features->add_option("--out", features_out, "Output path (default stdout)");
  add_common(features, common, false);

  auto* serve = app.add_subcommand("serve", "Run the HTTP API");
  std::string listen, ui_dir;
  serve->add_option("--listen", listen, "host:port (default $CLIO_LISTEN or 127.0.0.1:8080)");
  serve->add_option("--ui-dir", ui_dir, "Static dashboard bundle served at / (default $CLIO_UI_DIR)");
  add_common(serve, common, false);

  auto* query = app.add_subcommand("query", "DRIFT search over an exported thought graph");
  std::string graph_path;
  int folds = 2, follow_ups = 3;
  query->add_option("--graph", graph_path, "Graph export JSON")->required();
  query->add_option("--question,-q", question, "Question text")->required();
  query->add_option("--f", folds, "Folds");
  query->add_option("--u", follow_ups, "Follow-ups per fold");
  add_common(query, common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalidInput;
  }

  try {
    if (*run) return cmd_run(common, question, mode, show_events);
    if (*bench) return cmd_bench(common, bench_args);
    if (*features) return cmd_features(common, run_ids, all_runs, features_out, features_json);
    if (*serve) return cmd_serve(common, listen, ui_dir);
    if (*query) return cmd_query(common, graph_path, question, folds, follow_ups);
  } catch (const clio::Error& e) {
    return report(e);
  } catch (const std::exception& e) {
    std::cerr << "clio: " << e.what() << "\n";
    return kRunFailures;
  }
  return kInvalidInput;
}
