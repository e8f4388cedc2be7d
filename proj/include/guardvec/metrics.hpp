// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "guardvec/decision.hpp"
#include "guardvec/label.hpp"

namespace guardvec {

/// Standard confusion tallies, positive class = UNSAFE. `errored` counts
/// samples excluded from scoring; they appear in no other cell.
struct ConfusionCounts {
  uint64_t tp = 0;
  uint64_t fp = 0;
  uint64_t tn = 0;
  uint64_t fn = 0;
  uint64_t errored = 0;

  uint64_t scored() const { return tp + fp + tn + fn; }
};

ConfusionCounts confusion(const std::vector<std::pair<Label, Label>>& gold_pred);

/// One regime's metric block. Every rate is a percentage held at full
/// precision; rounding to 2 decimals (half-even) happens only in to_json and
/// the table/CSV renderers. A rate whose denominator is empty stays unset
/// and renders as null, never as 0.
struct MetricsReport {
  ConfusionCounts counts;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::optional<double> fpr;
  std::optional<double> fnr;
  std::optional<double> ber;
  std::optional<double> accuracy;  // overall accuracy over scored samples
  std::optional<double> mean_ttd;  // streaming only
  std::optional<double> ttd_p50;
  std::optional<double> ttd_p95;
  uint64_t n_detected_unsafe = 0;

  nlohmann::json to_json() const;
};

/// All rates derivable from the counts. ber is (fpr+fnr)/2 exactly,
/// pre-rounding; f1 is the harmonic mean of precision and recall.
MetricsReport rates(const ConfusionCounts& counts);

/// F1 and BER from already-published percentage rates.
double f1_from_pr(double precision_pct, double recall_pct);
double ber_from(double fpr_pct, double fnr_pct);

/// Accuracy on an all-SAFE evaluation set: 100*tn/(tn+fp). Throws
/// ValidationError if any positive-class sample is present.
double accuracy_all_safe(const ConfusionCounts& counts);

struct TtdStats {
  std::optional<double> mean;  // percentages
  std::optional<double> p50;
  std::optional<double> p95;
  uint64_t n_detected = 0;
};

/// TTD over gold-UNSAFE samples with a detection; non-detections and SAFE
/// samples are excluded. Unset when nothing was detected.
TtdStats ttd_stats(const std::vector<std::pair<Label, StreamingOutcome>>& gold_outcomes);
std::optional<double> mean_ttd(const std::vector<std::pair<Label, StreamingOutcome>>& gold_outcomes);

/// Binary cross-entropy, summed: -sum(y log p + (1-y) log(1-p)) with p
/// clamped to [1e-12, 1-1e-12]. y=1 means UNSAFE.
double bce_loss(const std::vector<std::pair<double, Label>>& pairs);

/// Round to `decimals` places with ties to even, resolved on the binary
/// value. Presentation only; never feed the result back into arithmetic.
double round_half_even(double value, int decimals);

enum class Regime : uint8_t { Offline, Streaming };

const char* regime_name(Regime r);

struct SweepPoint {
  double tau = 0.0;
  Regime regime = Regime::Offline;
  MetricsReport report;
};

/// Replay cached score traces at each threshold. Offline decides on the
/// full-text score (the trace's last entry); streaming decides UNSAFE iff
/// any prefix score crosses tau, with detection at the first crossing.
/// Throws ValidationError on a trace with no scores.
std::vector<SweepPoint> threshold_sweep(const std::vector<ScoreTrace>& traces,
                                        const std::vector<double>& taus, Regime regime);

/// Default sweep grid: 0.05 to 0.95 in steps of 0.05.
std::vector<double> default_taus();

/// Long-format figure data: header tau,metric,regime,value; one row per
/// defined metric, 2-decimal values.
std::string sweep_csv(const std::vector<SweepPoint>& points);

/// Two-regime comparison table: F1 off/str, dF1, BER off/str, TTD.
std::string comparison_table(const MetricsReport& offline, const MetricsReport& streaming);

}  // namespace guardvec
