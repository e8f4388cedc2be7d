// SPDX-License-Identifier: Apache-2.0
#include "guardvec/evaluate.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <mutex>
#include <thread>

#include "guardvec/errors.hpp"
#include "guardvec/text.hpp"

namespace guardvec {

Verdict evaluate_offline(const LabeledResponse& sample, ClassifierClient& client, double tau) {
  return client.classify(sample.text, tau);
}

StreamingOutcome evaluate_streaming(const LabeledResponse& sample, ClassifierClient& client,
                                    double tau, uint64_t step) {
  const uint64_t length = text::grapheme_count(sample.text);
  if (length == 0) throw ValidationError("streaming evaluation needs non-empty text");
  StreamingOutcome out;
  out.response_length = length;
  const auto breaks = text::grapheme_breaks(sample.text);
  for (const uint64_t k : prefix_schedule(length, step)) {
    const std::string prefix = sample.text.substr(0, breaks[k]);
    Verdict v = client.classify(prefix, tau);
    const Label decision = v.decision;
    out.per_prefix.emplace_back(k, std::move(v));
    if (decision == Label::Unsafe) {
      out.final = Label::Unsafe;
      out.detection_k = k;
      out.ttd = static_cast<double>(k) / static_cast<double>(length);
      break;  // early termination: nothing after the first detection
    }
  }
  return out;
}

ScoreTrace score_streaming(const LabeledResponse& sample, ClassifierClient& client,
                           uint64_t step) {
  if (client.mode() != ClassifierMode::SingleToken)
    throw ValidationError("threshold replay needs per-prefix probabilities; "
                          "the endpoint only produces parsed judgments");
  const uint64_t length = text::grapheme_count(sample.text);
  if (length == 0) throw ValidationError("scoring needs non-empty text");
  ScoreTrace trace;
  trace.id = sample.id;
  trace.gold = sample.label;
  trace.length = length;
  const auto breaks = text::grapheme_breaks(sample.text);
  for (const uint64_t k : prefix_schedule(length, step)) {
    const Verdict v = client.classify(sample.text.substr(0, breaks[k]), 0.5);
    trace.prefix_scores.emplace_back(k, *v.p_unsafe);
  }
  return trace;
}

namespace {

// Run fn(sample, client, slot) over every sample with up to `concurrency`
// workers, one client per worker. fn handles per-sample failures itself; a
// worker that cannot even build its client fails the whole run.
template <typename Fn>
void for_each_sample(const std::vector<LabeledResponse>& samples, const ClientFactory& factory,
                     int concurrency, Fn&& fn) {
  const size_t n = samples.size();
  if (n == 0) return;
  const size_t workers = std::min<size_t>(std::max(concurrency, 1), n);
  std::atomic<size_t> next{0};
  auto body = [&](ClassifierClient& client) {
    for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(samples[i], client, i);
  };
  if (workers == 1) {
    const auto client = factory();
    body(*client);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::mutex error_mu;
  for (size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      try {
        const auto client = factory();
        body(*client);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace

EvalRun run_evaluation(const std::vector<LabeledResponse>& samples, const ClientFactory& factory,
                       const EvalConfig& cfg) {
  if (!(cfg.tau > 0.0 && cfg.tau < 1.0))
    throw ValidationError(fmt::format("tau must be in (0,1), got {}", cfg.tau));
  if (cfg.step == 0) throw ValidationError("step must be positive");

  EvalRun run;
  run.records.resize(samples.size());
  for_each_sample(samples, factory, cfg.concurrency,
                  [&](const LabeledResponse& sample, ClassifierClient& client, size_t slot) {
                    SampleRecord rec;
                    rec.id = sample.id;
                    rec.gold = sample.label;
                    try {
                      if (cfg.mode != EvalMode::Streaming)
                        rec.offline = evaluate_offline(sample, client, cfg.tau);
                      if (cfg.mode != EvalMode::Offline)
                        rec.streaming = evaluate_streaming(sample, client, cfg.tau, cfg.step);
                    } catch (const std::exception& e) {
                      rec = SampleRecord{};
                      rec.id = sample.id;
                      rec.gold = sample.label;
                      rec.errored = true;
                      rec.error_reason = e.what();
                    }
                    run.records[slot] = std::move(rec);
                  });
  std::sort(run.records.begin(), run.records.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.id < b.id; });
  for (const auto& r : run.records)
    if (r.errored) ++run.errored;
  return run;
}

ScoringRun run_scoring(const std::vector<LabeledResponse>& samples, const ClientFactory& factory,
                       uint64_t step, int concurrency) {
  if (step == 0) throw ValidationError("step must be positive");
  {
    const auto probe = factory();
    if (probe->mode() != ClassifierMode::SingleToken)
      throw ValidationError("threshold replay needs per-prefix probabilities; "
                            "the endpoint only produces parsed judgments");
  }
  std::vector<std::optional<ScoreTrace>> slots(samples.size());
  std::vector<std::string> failed(samples.size());
  for_each_sample(samples, factory, concurrency,
                  [&](const LabeledResponse& sample, ClassifierClient& client, size_t slot) {
                    try {
                      slots[slot] = score_streaming(sample, client, step);
                    } catch (const std::exception&) {
                      failed[slot] = sample.id;
                    }
                  });
  ScoringRun run;
  for (size_t i = 0; i < slots.size(); ++i) {
    if (slots[i]) {
      run.traces.push_back(std::move(*slots[i]));
    } else {
      ++run.errored;
      run.errored_ids.push_back(failed[i]);
    }
  }
  std::sort(run.traces.begin(), run.traces.end(),
            [](const ScoreTrace& a, const ScoreTrace& b) { return a.id < b.id; });
  std::sort(run.errored_ids.begin(), run.errored_ids.end());
  return run;
}

MetricsReport offline_metrics(const EvalRun& run) {
  std::vector<std::pair<Label, Label>> gold_pred;
  for (const auto& rec : run.records) {
    if (rec.errored) continue;
    if (!rec.offline) throw ValidationError("run has no offline records");
    gold_pred.emplace_back(rec.gold, rec.offline->decision);
  }
  MetricsReport report = rates(confusion(gold_pred));
  report.counts.errored = run.errored;
  return report;
}

MetricsReport streaming_metrics(const EvalRun& run) {
  std::vector<std::pair<Label, Label>> gold_pred;
  std::vector<std::pair<Label, StreamingOutcome>> gold_outcomes;
  for (const auto& rec : run.records) {
    if (rec.errored) continue;
    if (!rec.streaming) throw ValidationError("run has no streaming records");
    gold_pred.emplace_back(rec.gold, rec.streaming->final);
    gold_outcomes.emplace_back(rec.gold, *rec.streaming);
  }
  MetricsReport report = rates(confusion(gold_pred));
  report.counts.errored = run.errored;
  const TtdStats stats = ttd_stats(gold_outcomes);
  report.mean_ttd = stats.mean;
  report.ttd_p50 = stats.p50;
  report.ttd_p95 = stats.p95;
  report.n_detected_unsafe = stats.n_detected;
  return report;
}

nlohmann::json verdict_to_json(const Verdict& v) {
  nlohmann::json doc{{"decision", label_name(v.decision)},
                     {"source", v.source == VerdictSource::SingleToken ? "single_token"
                                                                       : "generation_parse"}};
  if (v.p_unsafe) doc["p_unsafe"] = *v.p_unsafe;
  if (v.parse_failure) doc["parse_failure"] = true;
  return doc;
}

nlohmann::json streaming_to_json(const StreamingOutcome& o) {
  nlohmann::json prefixes = nlohmann::json::array();
  for (const auto& [k, v] : o.per_prefix) {
    nlohmann::json e = verdict_to_json(v);
    e["k"] = k;
    prefixes.push_back(std::move(e));
  }
  nlohmann::json doc{{"final", label_name(o.final)},
                     {"response_length", o.response_length},
                     {"detection_k", nullptr},
                     {"ttd", nullptr},
                     {"per_prefix", std::move(prefixes)}};
  if (o.detection_k) doc["detection_k"] = *o.detection_k;
  if (o.ttd) doc["ttd"] = *o.ttd;
  return doc;
}

nlohmann::json SampleRecord::to_json() const {
  nlohmann::json doc{{"id", id}, {"gold", label_name(gold)}};
  if (errored) {
    doc["errored"] = true;
    doc["error_reason"] = error_reason;
    return doc;
  }
  if (offline) doc["offline"] = verdict_to_json(*offline);
  if (streaming) doc["streaming"] = streaming_to_json(*streaming);
  return doc;
}

void write_sample_records(const EvalRun& run, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure(fmt::format("cannot open for writing: {}", path.string()));
  for (const auto& rec : run.records) out << rec.to_json().dump() << '\n';
  out.flush();
  if (!out) throw RuntimeFailure(fmt::format("write failed: {}", path.string()));
}

}  // namespace guardvec
