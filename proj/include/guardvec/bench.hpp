// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace guardvec {

struct BenchRequest {
  const std::string* text = nullptr;  // payload drawn from the dataset
};

struct BenchResponse {
  bool ok = true;
  std::optional<uint64_t> tokens;  // endpoint-reported usage, when present
  std::string error;
};

/// One blocking request. The harness measures latency around the call.
using BenchEndpoint = std::function<BenchResponse(const BenchRequest&)>;

struct LoadConfig {
  int concurrency = 10;
  uint64_t requests = 1000;       // total request budget (includes warmup)
  double warmup_fraction = 0.05;  // leading completions excluded from stats
  std::vector<std::string> payloads;
  std::string payload_kind = "streaming prefix pool";  // recorded in the report
  bool keep_events = false;  // retain per-request timestamps in the report
};

/// One completed request, timestamps in nanoseconds on the harness clock.
struct BenchEvent {
  uint64_t start_ns = 0;
  uint64_t end_ns = 0;
  bool ok = true;
  std::optional<uint64_t> tokens;
  uint64_t payload_chars = 0;
};

struct LatencySummary {
  double avg_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double p99_ms = 0.0;
};

struct EfficiencyReport {
  bool valid = false;
  std::string invalid_reason;
  int concurrency = 0;
  uint64_t completed = 0;        // counted in the steady-state window
  uint64_t warmup_excluded = 0;
  uint64_t errored = 0;
  double window_seconds = 0.0;   // [first counted completion's predecessor, last completion)
  double qps = 0.0;              // completed / window_seconds
  double tps = 0.0;              // sum(tokens) / window_seconds
  bool tps_estimated = false;    // true when any token count fell back to chars/4
  LatencySummary latency;
  double littles_law_ratio = 0.0;  // qps * avg_latency_s / concurrency
  std::string payload_kind;
  std::vector<BenchEvent> events;  // counted events, present when keep_events

  nlohmann::json to_json() const;
};

/// Closed-loop load: exactly `concurrency` requests in flight; each
/// completion immediately triggers the next send until the budget is spent.
/// Statistics cover only post-warmup completions. A run with zero counted
/// completions (or only errors) comes back invalid, never throws.
EfficiencyReport run_load(const LoadConfig& cfg, const BenchEndpoint& endpoint);

/// Deterministic single-threaded variant: a discrete-event simulation of the
/// same closed loop where every request takes exactly `service_time_ms` of
/// virtual time. Token counts still come from the endpoint (called with no
/// real waiting). Byte-identical reports across runs.
EfficiencyReport run_load_virtual(const LoadConfig& cfg, double service_time_ms,
                                  const BenchEndpoint& endpoint);

/// Largest number of simultaneously in-flight requests an event log admits.
/// The closed-loop invariant is max_in_flight(events) <= concurrency.
int max_in_flight(const std::vector<BenchEvent>& events);

}  // namespace guardvec
