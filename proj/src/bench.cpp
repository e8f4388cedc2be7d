// SPDX-License-Identifier: Apache-2.0
#include "guardvec/bench.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <queue>
#include <thread>

#include "guardvec/errors.hpp"
#include "guardvec/text.hpp"

namespace guardvec {

namespace {

void validate(const LoadConfig& cfg) {
  if (cfg.concurrency < 1) throw ValidationError("concurrency must be at least 1");
  if (cfg.requests < 1) throw ValidationError("request budget must be at least 1");
  if (!(cfg.warmup_fraction >= 0.0 && cfg.warmup_fraction < 1.0))
    throw ValidationError("warmup fraction must be in [0,1)");
  if (cfg.payloads.empty()) throw ValidationError("payload set is empty");
}

double percentile_ms(const std::vector<double>& sorted, double q) {
  const size_t rank = static_cast<size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  return sorted[std::max<size_t>(rank, 1) - 1];
}

// Shared post-processing: warmup exclusion, the steady-state window, and
// every aggregate. `all_ok` must be sorted by completion time.
EfficiencyReport summarize(const LoadConfig& cfg, std::vector<BenchEvent> all_ok,
                           uint64_t errored) {
  EfficiencyReport rep;
  rep.concurrency = cfg.concurrency;
  rep.errored = errored;
  rep.payload_kind = cfg.payload_kind;

  const uint64_t warmup =
      static_cast<uint64_t>(static_cast<double>(cfg.requests) * cfg.warmup_fraction);
  rep.warmup_excluded = std::min<uint64_t>(warmup, all_ok.size());
  const size_t first = rep.warmup_excluded;
  if (first >= all_ok.size()) {
    rep.invalid_reason = "no completed requests in steady-state window";
    return rep;
  }

  // Window: from the last warmup completion (run start when no warmup) to
  // the final completion. qps is completions per second inside it.
  const uint64_t window_begin = first > 0 ? all_ok[first - 1].end_ns : 0;
  const uint64_t window_end = all_ok.back().end_ns;
  if (window_end <= window_begin) {
    rep.invalid_reason = "zero-length steady-state window";
    return rep;
  }
  rep.completed = all_ok.size() - first;
  rep.window_seconds = static_cast<double>(window_end - window_begin) / 1e9;
  rep.qps = static_cast<double>(rep.completed) / rep.window_seconds;

  std::vector<double> lat_ms;
  lat_ms.reserve(rep.completed);
  double token_sum = 0.0;
  for (size_t i = first; i < all_ok.size(); ++i) {
    const auto& e = all_ok[i];
    lat_ms.push_back(static_cast<double>(e.end_ns - e.start_ns) / 1e6);
    if (e.tokens) {
      token_sum += static_cast<double>(*e.tokens);
    } else {
      token_sum += static_cast<double>(e.payload_chars) / 4.0;  // flagged estimate
      rep.tps_estimated = true;
    }
  }
  rep.tps = token_sum / rep.window_seconds;

  double sum = 0.0;
  for (const double l : lat_ms) sum += l;
  rep.latency.avg_ms = sum / static_cast<double>(lat_ms.size());
  std::sort(lat_ms.begin(), lat_ms.end());
  rep.latency.p50_ms = percentile_ms(lat_ms, 0.50);
  rep.latency.p95_ms = percentile_ms(lat_ms, 0.95);
  rep.latency.p99_ms = percentile_ms(lat_ms, 0.99);

  rep.littles_law_ratio =
      rep.qps * (rep.latency.avg_ms / 1000.0) / static_cast<double>(cfg.concurrency);
  rep.valid = true;
  if (cfg.keep_events) rep.events = std::move(all_ok);
  return rep;
}

std::vector<uint64_t> payload_char_counts(const std::vector<std::string>& payloads) {
  std::vector<uint64_t> counts;
  counts.reserve(payloads.size());
  for (const auto& p : payloads) counts.push_back(text::grapheme_count(p));
  return counts;
}

}  // namespace

EfficiencyReport run_load(const LoadConfig& cfg, const BenchEndpoint& endpoint) {
  validate(cfg);
  const auto chars = payload_char_counts(cfg.payloads);

  const auto t0 = std::chrono::steady_clock::now();
  const auto now_ns = [t0] {
    return static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                     std::chrono::steady_clock::now() - t0)
                                     .count());
  };

  const int workers = static_cast<int>(
      std::min<uint64_t>(static_cast<uint64_t>(cfg.concurrency), cfg.requests));
  std::atomic<uint64_t> issued{0};
  std::vector<std::vector<BenchEvent>> ok_events(workers);
  std::vector<uint64_t> errors(workers, 0);

  // Closed loop: each worker holds exactly one request in flight, and a
  // completion immediately issues the next one.
  auto worker = [&](int w) {
    for (uint64_t i = issued.fetch_add(1); i < cfg.requests; i = issued.fetch_add(1)) {
      const size_t p = i % cfg.payloads.size();
      BenchRequest req;
      req.text = &cfg.payloads[p];
      BenchEvent ev;
      ev.payload_chars = chars[p];
      ev.start_ns = now_ns();
      BenchResponse resp;
      try {
        resp = endpoint(req);
      } catch (const std::exception& e) {
        resp.ok = false;
        resp.error = e.what();
      }
      ev.end_ns = now_ns();
      if (!resp.ok) {
        errors[w] += 1;
        continue;
      }
      ev.tokens = resp.tokens;
      ok_events[w].push_back(ev);
    }
  };

  if (workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }

  std::vector<BenchEvent> all_ok;
  uint64_t errored = 0;
  for (int w = 0; w < workers; ++w) {
    all_ok.insert(all_ok.end(), ok_events[w].begin(), ok_events[w].end());
    errored += errors[w];
  }
  std::sort(all_ok.begin(), all_ok.end(), [](const BenchEvent& a, const BenchEvent& b) {
    return a.end_ns != b.end_ns ? a.end_ns < b.end_ns : a.start_ns < b.start_ns;
  });
  return summarize(cfg, std::move(all_ok), errored);
}

EfficiencyReport run_load_virtual(const LoadConfig& cfg, double service_time_ms,
                                  const BenchEndpoint& endpoint) {
  validate(cfg);
  if (!(service_time_ms > 0.0)) throw ValidationError("virtual service time must be positive");
  const auto chars = payload_char_counts(cfg.payloads);
  const auto service_ns = static_cast<uint64_t>(std::llround(service_time_ms * 1e6));

  // Discrete-event closed loop: the earliest-free server (lowest id on ties)
  // takes the next request. Single-threaded and fully deterministic.
  using Slot = std::pair<uint64_t, int>;  // (ready_ns, server)
  std::priority_queue<Slot, std::vector<Slot>, std::greater<Slot>> servers;
  for (int s = 0; s < cfg.concurrency; ++s) servers.emplace(0, s);

  std::vector<BenchEvent> all_ok;
  uint64_t errored = 0;
  for (uint64_t i = 0; i < cfg.requests; ++i) {
    const auto [ready_ns, server] = servers.top();
    servers.pop();
    const size_t p = i % cfg.payloads.size();
    BenchRequest req;
    req.text = &cfg.payloads[p];
    BenchResponse resp;
    try {
      resp = endpoint(req);
    } catch (const std::exception& e) {
      resp.ok = false;
      resp.error = e.what();
    }
    BenchEvent ev;
    ev.start_ns = ready_ns;
    ev.end_ns = ready_ns + service_ns;
    ev.payload_chars = chars[p];
    ev.tokens = resp.tokens;
    servers.emplace(ev.end_ns, server);
    if (!resp.ok) {
      errored += 1;
      continue;
    }
    all_ok.push_back(ev);
  }
  std::sort(all_ok.begin(), all_ok.end(), [](const BenchEvent& a, const BenchEvent& b) {
    return a.end_ns != b.end_ns ? a.end_ns < b.end_ns : a.start_ns < b.start_ns;
  });
  return summarize(cfg, std::move(all_ok), errored);
}

int max_in_flight(const std::vector<BenchEvent>& events) {
  // Sweep over interval endpoints; ends sort before starts at equal time
  // because intervals are half-open.
  std::vector<std::pair<uint64_t, int>> marks;
  marks.reserve(events.size() * 2);
  for (const auto& e : events) {
    marks.emplace_back(e.start_ns, +1);
    marks.emplace_back(e.end_ns, -1);
  }
  std::sort(marks.begin(), marks.end(),
            [](const auto& a, const auto& b) {
              return a.first != b.first ? a.first < b.first : a.second < b.second;
            });
  int cur = 0, peak = 0;
  for (const auto& [t, d] : marks) {
    cur += d;
    peak = std::max(peak, cur);
  }
  return peak;
}

nlohmann::json EfficiencyReport::to_json() const {
  nlohmann::json doc{
      {"valid", valid},
      {"concurrency", concurrency},
      {"completed", completed},
      {"warmup_excluded", warmup_excluded},
      {"errored", errored},
      {"window_seconds", window_seconds},
      {"qps", qps},
      {"tps", tps},
      {"tps_estimated", tps_estimated},
      {"latency_ms",
       {{"avg", latency.avg_ms},
        {"p50", latency.p50_ms},
        {"p95", latency.p95_ms},
        {"p99", latency.p99_ms}}},
      {"littles_law_ratio", littles_law_ratio},
      {"payload_kind", payload_kind},
  };
  if (!valid) doc["invalid_reason"] = invalid_reason;
  return doc;
}

}  // namespace guardvec
