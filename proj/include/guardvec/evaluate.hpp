// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "guardvec/classifier.hpp"
#include "guardvec/decision.hpp"
#include "guardvec/metrics.hpp"
#include "guardvec/prefix.hpp"

namespace guardvec {

enum class EvalMode : uint8_t { Offline, Streaming, Both };

struct EvalConfig {
  EvalMode mode = EvalMode::Both;
  double tau = 0.5;
  uint64_t step = 100;
  int concurrency = 4;  // in-flight sample limit
};

/// One full-text classifier call. Transport problems propagate as
/// RuntimeFailure; callers that batch samples catch per sample.
Verdict evaluate_offline(const LabeledResponse& sample, ClassifierClient& client, double tau);

/// Prefix sweep in increasing K with early termination at the first UNSAFE.
/// An error on any prefix aborts the whole sample.
StreamingOutcome evaluate_streaming(const LabeledResponse& sample, ClassifierClient& client,
                                    double tau, uint64_t step);

/// Per-prefix scores for one sample with no early termination, so any
/// threshold can be replayed offline later. The last entry is the full text,
/// which doubles as the offline score. Requires a single-token client.
ScoreTrace score_streaming(const LabeledResponse& sample, ClassifierClient& client,
                           uint64_t step);

/// Everything recorded for one sample. Exactly the fields for the requested
/// regimes are set; errored samples carry a reason and nothing else.
struct SampleRecord {
  std::string id;
  Label gold = Label::Safe;
  std::optional<Verdict> offline;
  std::optional<StreamingOutcome> streaming;
  bool errored = false;
  std::string error_reason;

  nlohmann::json to_json() const;
};

struct EvalRun {
  std::vector<SampleRecord> records;  // sorted by sample id
  uint64_t errored = 0;
};

/// Evaluate a dataset with up to cfg.concurrency samples in flight, one
/// client per worker. Per-sample failures become errored records; the run
/// always completes.
EvalRun run_evaluation(const std::vector<LabeledResponse>& samples, const ClientFactory& factory,
                       const EvalConfig& cfg);

struct ScoringRun {
  std::vector<ScoreTrace> traces;  // sorted by sample id
  uint64_t errored = 0;
  std::vector<std::string> errored_ids;
};

/// Score a dataset for threshold replay. Same concurrency scheme as
/// run_evaluation. Throws ValidationError if the client cannot produce
/// probabilities (generation mode).
ScoringRun run_scoring(const std::vector<LabeledResponse>& samples, const ClientFactory& factory,
                       uint64_t step, int concurrency);

/// Metric blocks over a finished run. Errored samples are excluded from
/// every cell and surfaced in counts.errored. Throws ValidationError when
/// the run lacks the regime's records.
MetricsReport offline_metrics(const EvalRun& run);
MetricsReport streaming_metrics(const EvalRun& run);

nlohmann::json verdict_to_json(const Verdict& v);
nlohmann::json streaming_to_json(const StreamingOutcome& o);

void write_sample_records(const EvalRun& run, const std::filesystem::path& path);

}  // namespace guardvec
