// SPDX-License-Identifier: Apache-2.0
// guardvec: compose guard vectors into checkpoints, build prefix datasets,
// evaluate classifier endpoints, sweep thresholds, and run the load harness.
//
// Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure.
#include <CLI11.hpp>
#include <fmt/core.h>
#include <httplib.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <thread>

#include "guardvec/bench.hpp"
#include "guardvec/classifier.hpp"
#include "guardvec/compose.hpp"
#include "guardvec/errors.hpp"
#include "guardvec/evaluate.hpp"
#include "guardvec/metrics.hpp"
#include "guardvec/prefix.hpp"
#include "guardvec/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace guardvec;

void write_json_file(const json& doc, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure(fmt::format("cannot open for writing: {}", path.string()));
  out << doc.dump(2) << '\n';
  out.flush();
  if (!out) throw RuntimeFailure(fmt::format("write failed: {}", path.string()));
}

void write_text_file(const std::string& text, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure(fmt::format("cannot open for writing: {}", path.string()));
  out << text;
  out.flush();
  if (!out) throw RuntimeFailure(fmt::format("write failed: {}", path.string()));
}

void emit_manifest(const json& config, std::vector<fs::path> inputs, const fs::path& out) {
  // The endpoint's mock table is an input too; hash it for reproducibility.
  if (config.contains("endpoint")) {
    const auto ep = config["endpoint"].get<std::string>();
    if (ep.rfind("mock://", 0) == 0) inputs.emplace_back(ep.substr(7));
  }
  write_manifest(build_manifest(config, inputs), manifest_path_for(out));
}

// ------------------------------------------------------------- compose ----

struct ComposeArgs {
  std::string plm, gm, cp, out;
  std::string rules;
  std::string report;
  std::string policy = "reject";
  int threads = 0;
};

void run_compose(const ComposeArgs& a) {
  log_line("info", "compose.begin",
           {{"plm", a.plm}, {"gm", a.gm}, {"cp", a.cp}, {"out", a.out}});
  const auto rules = a.rules.empty() ? ExclusionRules::defaults() : ExclusionRules::load(a.rules);
  const auto base = CheckpointIndex::open(a.plm);
  const auto guard = CheckpointIndex::open(a.gm);
  const auto target = CheckpointIndex::open(a.cp);

  ComposeOptions opts;
  opts.policy = a.policy == "allow" ? NonFinitePolicy::Allow : NonFinitePolicy::Reject;
  opts.threads = a.threads;
  const auto report = fused_compose(base, guard, target, rules, a.out, opts);

  const fs::path report_path = a.report.empty() ? fs::path(a.out + ".report.json")
                                                : fs::path(a.report);
  write_json_file(report.to_json(), report_path);

  json config{{"subcommand", "compose"}, {"plm", a.plm},         {"gm", a.gm},
              {"cp", a.cp},              {"out", a.out},         {"rules", a.rules},
              {"policy", a.policy},      {"threads", a.threads}, {"report", report_path.string()}};
  std::vector<fs::path> inputs{a.plm, a.gm, a.cp};
  if (!a.rules.empty()) inputs.emplace_back(a.rules);
  emit_manifest(config, std::move(inputs), a.out);
  log_line("info", "compose.done",
           {{"included", report.domain.included.size()},
            {"carried", report.carried_from_target.size()},
            {"output_tensors", report.output_tensors}});
}

// ------------------------------------------------------- build-prefixes ----

struct BuildArgs {
  std::string dataset, out;
  std::string stats;
  std::string balance = "global";
  uint64_t step = 100;
  uint64_t seed = 0;
};

BalanceMode parse_balance(const std::string& name) {
  if (name == "none") return BalanceMode::None;
  if (name == "global") return BalanceMode::Global;
  return BalanceMode::PerCategory;
}

void run_build_prefixes(const BuildArgs& a) {
  log_line("info", "build_prefixes.begin",
           {{"dataset", a.dataset}, {"step", a.step}, {"seed", a.seed}, {"balance", a.balance}});
  const auto responses = read_labeled_responses(a.dataset);
  const auto result = build_prefix_pool(responses, a.step, a.seed, parse_balance(a.balance));
  for (const auto& w : result.stats.warnings) log_line("warn", "rebalance", {{"message", w}});
  write_prefix_samples(result.samples, a.out);

  const fs::path stats_path = a.stats.empty() ? fs::path(a.out + ".stats.json")
                                              : fs::path(a.stats);
  write_json_file(result.stats.to_json(), stats_path);

  json config{{"subcommand", "build-prefixes"}, {"dataset", a.dataset}, {"out", a.out},
              {"step", a.step},                 {"seed", a.seed},       {"balance", a.balance},
              {"stats", stats_path.string()}};
  emit_manifest(config, {a.dataset}, a.out);
  log_line("info", "build_prefixes.done",
           {{"responses", responses.size()}, {"samples", result.samples.size()}});
}

// ------------------------------------------------------------ evaluate ----

struct EvaluateArgs {
  std::string endpoint, dataset, out;
  std::string metrics;
  std::string mode = "both";
  std::string pipeline = "logits";
  std::string system_prompt;
  double tau = 0.5;
  uint64_t step = 100;
  int concurrency = 4;
  double timeout = 30.0;
  uint64_t max_tokens = 32;
};

ClientOptions client_options(const EvaluateArgs& a) {
  ClientOptions opts;
  if (!a.system_prompt.empty()) opts.system_prompt = a.system_prompt;
  opts.timeout_seconds = a.timeout;
  opts.max_tokens = a.max_tokens;
  return opts;
}

json metrics_block(const MetricsReport& report, const EvalRun& run, bool offline) {
  json doc = report.to_json();
  if (!offline) return doc;
  // Eq-style summed cross-entropy, only when every scored verdict carries a
  // probability (single-token pipeline).
  std::vector<std::pair<double, Label>> pairs;
  for (const auto& rec : run.records) {
    if (rec.errored) continue;
    if (!rec.offline || !rec.offline->p_unsafe) return doc;
    pairs.emplace_back(*rec.offline->p_unsafe, rec.gold);
  }
  if (!pairs.empty()) doc["bce_loss"] = bce_loss(pairs);
  return doc;
}

void run_evaluate(const EvaluateArgs& a) {
  log_line("info", "evaluate.begin",
           {{"endpoint", a.endpoint}, {"dataset", a.dataset}, {"mode", a.mode}, {"tau", a.tau}});
  const auto responses = read_labeled_responses(a.dataset);
  const auto mode_http = a.pipeline == "generation" ? ClassifierMode::GenerationParse
                                                    : ClassifierMode::SingleToken;
  const auto factory = make_client_factory(a.endpoint, mode_http, client_options(a));

  EvalConfig cfg;
  cfg.mode = a.mode == "offline"     ? EvalMode::Offline
             : a.mode == "streaming" ? EvalMode::Streaming
                                     : EvalMode::Both;
  cfg.tau = a.tau;
  cfg.step = a.step;
  cfg.concurrency = a.concurrency;
  const auto run = run_evaluation(responses, factory, cfg);
  write_sample_records(run, a.out);
  if (!run.records.empty() && run.errored == run.records.size())
    throw RuntimeFailure(
        fmt::format("all {} samples errored; endpoint unreachable?", run.errored));

  json metrics{{"errored", run.errored}, {"scored", run.records.size() - run.errored}};
  std::optional<MetricsReport> off, str;
  if (cfg.mode != EvalMode::Streaming) {
    off = offline_metrics(run);
    metrics["offline"] = metrics_block(*off, run, true);
  }
  if (cfg.mode != EvalMode::Offline) {
    str = streaming_metrics(run);
    metrics["streaming"] = metrics_block(*str, run, false);
  }
  if (off && str) {
    if (off->f1 && str->f1)
      metrics["delta_f1"] = round_half_even(*off->f1 - *str->f1, 2);
    else
      metrics["delta_f1"] = nullptr;
    fmt::print("{}", comparison_table(*off, *str));
  }
  const fs::path metrics_path =
      a.metrics.empty() ? fs::path(a.out).parent_path() / "metrics.json" : fs::path(a.metrics);
  write_json_file(metrics, metrics_path);

  json config{{"subcommand", "evaluate"},
              {"endpoint", a.endpoint},
              {"dataset", a.dataset},
              {"out", a.out},
              {"metrics", metrics_path.string()},
              {"mode", a.mode},
              {"pipeline", a.pipeline},
              {"tau", a.tau},
              {"step", a.step},
              {"concurrency", a.concurrency},
              {"system_prompt", a.system_prompt},
              {"timeout", a.timeout},
              {"max_tokens", a.max_tokens}};
  emit_manifest(config, {a.dataset}, a.out);
  log_line("info", "evaluate.done",
           {{"samples", run.records.size()}, {"errored", run.errored}});
}

// ------------------------------------------------------ sweep-threshold ----

struct SweepArgs {
  std::string endpoint, dataset, out;
  std::string csv;
  std::vector<double> taus;
  uint64_t step = 100;
  int concurrency = 4;
  double timeout = 30.0;
};

void run_sweep(const SweepArgs& a) {
  log_line("info", "sweep.begin", {{"endpoint", a.endpoint}, {"dataset", a.dataset}});
  const auto responses = read_labeled_responses(a.dataset);
  ClientOptions opts;
  opts.timeout_seconds = a.timeout;
  const auto factory = make_client_factory(a.endpoint, ClassifierMode::SingleToken, opts);
  const auto scoring = run_scoring(responses, factory, a.step, a.concurrency);
  for (const auto& id : scoring.errored_ids)
    log_line("warn", "sweep.sample_errored", {{"id", id}});
  if (scoring.traces.empty())
    throw RuntimeFailure(
        fmt::format("all {} samples errored; endpoint unreachable?", scoring.errored));

  const auto taus = a.taus.empty() ? default_taus() : a.taus;
  const auto offline = threshold_sweep(scoring.traces, taus, Regime::Offline);
  const auto streaming = threshold_sweep(scoring.traces, taus, Regime::Streaming);

  const auto points_json = [](const std::vector<SweepPoint>& points) {
    json arr = json::array();
    for (const auto& p : points)
      arr.push_back({{"tau", round_half_even(p.tau, 2)}, {"report", p.report.to_json()}});
    return arr;
  };
  json doc{{"taus", json::array()},
           {"offline", points_json(offline)},
           {"streaming", points_json(streaming)},
           {"scored", scoring.traces.size()},
           {"errored", scoring.errored},
           {"errored_ids", scoring.errored_ids}};
  for (const double t : taus) doc["taus"].push_back(round_half_even(t, 2));
  write_json_file(doc, a.out);

  auto all_points = offline;
  all_points.insert(all_points.end(), streaming.begin(), streaming.end());
  const fs::path csv_path =
      a.csv.empty() ? fs::path(a.out).replace_extension(".csv") : fs::path(a.csv);
  write_text_file(sweep_csv(all_points), csv_path);

  json config{{"subcommand", "sweep-threshold"},
              {"endpoint", a.endpoint},
              {"dataset", a.dataset},
              {"out", a.out},
              {"csv", csv_path.string()},
              {"step", a.step},
              {"taus", doc["taus"]},
              {"concurrency", a.concurrency}};
  emit_manifest(config, {a.dataset}, a.out);
  log_line("info", "sweep.done", {{"points", taus.size()}, {"errored", scoring.errored}});
}

// --------------------------------------------------------------- bench ----

struct BenchArgs {
  std::string endpoint, dataset, out;
  std::vector<int> concurrency{10};
  uint64_t requests = 1000;
  double warmup = 0.05;
  bool virtual_clock = false;
  double timeout = 30.0;
};

// Raw wire-protocol request for the harness: unlike the evaluation client it
// surfaces the optional usage field for token accounting.
BenchEndpoint http_bench_endpoint(const std::string& address, double timeout_seconds) {
  return [address, timeout_seconds](const BenchRequest& req) {
    thread_local std::unique_ptr<httplib::Client> cli;
    if (!cli) {
      cli = std::make_unique<httplib::Client>(address);
      const auto t = std::chrono::milliseconds(
          static_cast<long>(std::max(1.0, timeout_seconds * 1000.0)));
      cli->set_connection_timeout(t);
      cli->set_read_timeout(t);
      cli->set_write_timeout(t);
      if (const char* token = std::getenv("GUARDVEC_API_TOKEN"); token && *token)
        cli->set_default_headers({{"Authorization", fmt::format("Bearer {}", token)}});
    }
    BenchResponse out;
    const auto res = cli->Post("/v1/label_logits", json{{"text", *req.text}}.dump(),
                               "application/json");
    if (!res || res->status != 200) {
      out.ok = false;
      out.error = !res ? httplib::to_string(res.error()) : fmt::format("status {}", res->status);
      return out;
    }
    const auto doc = json::parse(res->body, nullptr, false);
    if (doc.is_object() && doc.contains("usage") && doc["usage"].is_object() &&
        doc["usage"].contains("total_tokens") && doc["usage"]["total_tokens"].is_number_unsigned())
      out.tokens = doc["usage"]["total_tokens"].get<uint64_t>();
    return out;
  };
}

void run_bench(const BenchArgs& a) {
  log_line("info", "bench.begin",
           {{"endpoint", a.endpoint}, {"requests", a.requests}, {"virtual", a.virtual_clock}});
  const auto pool = read_prefix_samples(a.dataset);
  LoadConfig cfg;
  cfg.requests = a.requests;
  cfg.warmup_fraction = a.warmup;
  cfg.payloads.reserve(pool.size());
  for (const auto& s : pool) cfg.payloads.push_back(s.text_prefix);

  BenchEndpoint endpoint;
  double service_ms = 0.0;
  std::shared_ptr<MockClassifier> mock;
  if (a.endpoint.rfind("mock://", 0) == 0) {
    mock = std::make_shared<MockClassifier>(MockClassifier::from_file(a.endpoint.substr(7)));
    service_ms = mock->service_time_ms();
    if (a.virtual_clock) {
      if (!(service_ms > 0.0))
        throw ValidationError("virtual clock needs service_time_ms > 0 in the mock table");
      endpoint = [mock](const BenchRequest& req) {
        mock->label_logits(*req.text);  // deterministic scoring, no waiting
        return BenchResponse{};
      };
    } else {
      endpoint = [mock](const BenchRequest& req) {
        mock->classify(*req.text, 0.5);  // sleeps the table's service time
        return BenchResponse{};
      };
    }
  } else if (a.endpoint.rfind("http://", 0) == 0 || a.endpoint.rfind("https://", 0) == 0) {
    if (a.virtual_clock)
      throw ValidationError("virtual clock requires a mock:// endpoint");
    endpoint = http_bench_endpoint(a.endpoint, a.timeout);
  } else {
    throw ValidationError(
        fmt::format("unsupported endpoint address '{}': expected mock:// or http(s)://", a.endpoint));
  }

  json levels = json::array();
  for (const int c : a.concurrency) {
    cfg.concurrency = c;
    const auto report = a.virtual_clock ? run_load_virtual(cfg, service_ms, endpoint)
                                        : run_load(cfg, endpoint);
    if (!report.valid)
      log_line("warn", "bench.invalid_level",
               {{"concurrency", c}, {"reason", report.invalid_reason}});
    levels.push_back(report.to_json());
  }
  json doc{{"payload_kind", cfg.payload_kind},
           {"requests_per_level", a.requests},
           {"virtual_clock", a.virtual_clock},
           {"levels", std::move(levels)}};
  write_json_file(doc, a.out);

  json config{{"subcommand", "bench"},     {"endpoint", a.endpoint},
              {"dataset", a.dataset},      {"out", a.out},
              {"concurrency", a.concurrency}, {"requests", a.requests},
              {"warmup", a.warmup},        {"virtual_clock", a.virtual_clock}};
  emit_manifest(config, {a.dataset}, a.out);
  log_line("info", "bench.done", {{"levels", a.concurrency.size()}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guard-vector toolkit: checkpoint composition, prefix datasets, "
               "guardrail evaluation, threshold sweeps, and load measurement."};
  app.require_subcommand(1);

  ComposeArgs compose_args;
  auto* compose = app.add_subcommand("compose", "Apply a guard vector to a target checkpoint");
  compose->add_option("--plm", compose_args.plm, "Base (pretrained) checkpoint")->required();
  compose->add_option("--gm", compose_args.gm, "Guard (fine-tuned) checkpoint")->required();
  compose->add_option("--cp", compose_args.cp, "Composition target checkpoint")->required();
  compose->add_option("--out", compose_args.out, "Output checkpoint path")->required();
  compose->add_option("--rules", compose_args.rules, "Exclusion rules JSON (default built-ins)");
  compose->add_option("--report", compose_args.report, "Report path (default <out>.report.json)");
  compose->add_option("--policy", compose_args.policy, "Non-finite handling")
      ->check(CLI::IsMember({"reject", "allow"}));
  compose->add_option("--threads", compose_args.threads, "Worker threads (0 = auto)");

  BuildArgs build_args;
  auto* build = app.add_subcommand("build-prefixes", "Expand labeled responses into a prefix pool");
  build->add_option("--dataset", build_args.dataset, "Labeled responses JSONL")->required();
  build->add_option("--out", build_args.out, "Prefix pool JSONL output")->required();
  build->add_option("--step", build_args.step, "Prefix step in characters");
  build->add_option("--seed", build_args.seed, "Rebalance seed");
  build->add_option("--balance", build_args.balance, "Class balancing scope")
      ->check(CLI::IsMember({"none", "global", "per-category"}));
  build->add_option("--stats", build_args.stats, "Stats path (default <out>.stats.json)");

  EvaluateArgs eval_args;
  auto* eval = app.add_subcommand("evaluate", "Run a classifier endpoint over a labeled dataset");
  eval->add_option("--endpoint", eval_args.endpoint, "mock://table.json or http(s)://host:port")
      ->required();
  eval->add_option("--dataset", eval_args.dataset, "Labeled responses JSONL")->required();
  eval->add_option("--out", eval_args.out, "Per-sample results JSONL")->required();
  eval->add_option("--mode", eval_args.mode, "Evaluation regime")
      ->check(CLI::IsMember({"offline", "streaming", "both"}));
  eval->add_option("--tau", eval_args.tau, "Unsafe decision threshold");
  eval->add_option("--step", eval_args.step, "Streaming prefix step in characters");
  eval->add_option("--pipeline", eval_args.pipeline, "Classifier interface")
      ->check(CLI::IsMember({"logits", "generation"}));
  eval->add_option("--concurrency", eval_args.concurrency, "In-flight sample limit");
  eval->add_option("--system-prompt", eval_args.system_prompt, "Optional system prompt");
  eval->add_option("--timeout", eval_args.timeout, "Request timeout seconds");
  eval->add_option("--max-tokens", eval_args.max_tokens, "Generation judgment cap");
  eval->add_option("--metrics", eval_args.metrics, "Metrics path (default metrics.json beside --out)");

  SweepArgs sweep_args;
  auto* sweep = app.add_subcommand("sweep-threshold", "Replay cached scores across thresholds");
  sweep->add_option("--endpoint", sweep_args.endpoint, "Single-token endpoint")->required();
  sweep->add_option("--dataset", sweep_args.dataset, "Labeled responses JSONL")->required();
  sweep->add_option("--out", sweep_args.out, "Sweep report JSON")->required();
  sweep->add_option("--csv", sweep_args.csv, "Figure CSV path (default <out>.csv)");
  sweep->add_option("--taus", sweep_args.taus, "Thresholds (default 0.05..0.95)")->delimiter(',');
  sweep->add_option("--step", sweep_args.step, "Prefix step in characters");
  sweep->add_option("--concurrency", sweep_args.concurrency, "In-flight sample limit");
  sweep->add_option("--timeout", sweep_args.timeout, "Request timeout seconds");

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "Closed-loop load harness");
  bench->add_option("--endpoint", bench_args.endpoint, "mock://table.json or http(s)://host:port")
      ->required();
  bench->add_option("--dataset", bench_args.dataset, "Prefix pool JSONL for request bodies")
      ->required();
  bench->add_option("--out", bench_args.out, "Efficiency report JSON")->required();
  bench->add_option("--concurrency", bench_args.concurrency, "Levels, e.g. 200,100,10")
      ->delimiter(',');
  bench->add_option("--requests", bench_args.requests, "Request budget per level");
  bench->add_option("--warmup", bench_args.warmup, "Warmup fraction excluded from stats");
  bench->add_flag("--virtual-clock", bench_args.virtual_clock,
                  "Deterministic discrete-event mode (mock endpoints only)");
  bench->add_option("--timeout", bench_args.timeout, "Request timeout seconds");

  try {
    app.parse(argc, argv);
    if (compose->parsed()) run_compose(compose_args);
    if (build->parsed()) run_build_prefixes(build_args);
    if (eval->parsed()) run_evaluate(eval_args);
    if (sweep->parsed()) run_sweep(sweep_args);
    if (bench->parsed()) run_bench(bench_args);
    return 0;
  } catch (const CLI::CallForHelp&) {
    fmt::print("{}", app.help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    fmt::print("{}", app.help("", CLI::AppFormatMode::All));
    return 0;
  } catch (const CLI::ParseError& e) {
    fmt::print(stderr, "{}\n\n{}", e.what(), app.help());
    return 1;
  } catch (const ValidationError& e) {
    log_line("error", "validation", {{"message", e.what()}});
    return 1;
  } catch (const RuntimeFailure& e) {
    log_line("error", "runtime", {{"message", e.what()}});
    return 2;
  } catch (const std::exception& e) {
    log_line("error", "unexpected", {{"message", e.what()}});
    return 2;
  }
}
