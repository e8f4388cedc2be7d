// SPDX-License-Identifier: Apache-2.0
#include "guardvec/metrics.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>

#include "guardvec/errors.hpp"

namespace guardvec {

ConfusionCounts confusion(const std::vector<std::pair<Label, Label>>& gold_pred) {
  ConfusionCounts c;
  for (const auto& [gold, pred] : gold_pred) {
    if (gold == Label::Unsafe) {
      (pred == Label::Unsafe ? c.tp : c.fn) += 1;
    } else {
      (pred == Label::Unsafe ? c.fp : c.tn) += 1;
    }
  }
  return c;
}

namespace {

double pct(uint64_t num, uint64_t den) {
  return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport rates(const ConfusionCounts& c) {
  MetricsReport r;
  r.counts = c;
  if (c.tp + c.fp > 0) r.precision = pct(c.tp, c.tp + c.fp);
  if (c.tp + c.fn > 0) {
    r.recall = pct(c.tp, c.tp + c.fn);
    r.fnr = pct(c.fn, c.tp + c.fn);
  }
  if (c.fp + c.tn > 0) r.fpr = pct(c.fp, c.fp + c.tn);
  if (r.precision && r.recall) r.f1 = f1_from_pr(*r.precision, *r.recall);
  if (r.fpr && r.fnr) r.ber = (*r.fpr + *r.fnr) / 2.0;
  if (c.scored() > 0) r.accuracy = pct(c.tp + c.tn, c.scored());
  return r;
}

double f1_from_pr(double precision_pct, double recall_pct) {
  const double sum = precision_pct + recall_pct;
  if (sum == 0.0) return 0.0;  // convention: both rates zero
  return 2.0 * precision_pct * recall_pct / sum;
}

double ber_from(double fpr_pct, double fnr_pct) { return (fpr_pct + fnr_pct) / 2.0; }

double accuracy_all_safe(const ConfusionCounts& c) {
  if (c.tp + c.fn > 0)
    throw ValidationError(fmt::format(
        "all-SAFE accuracy is only defined without positive-class samples (tp={}, fn={})", c.tp,
        c.fn));
  if (c.tn + c.fp == 0) throw ValidationError("all-SAFE accuracy over an empty set");
  return pct(c.tn, c.tn + c.fp);
}

namespace {

// Nearest-rank percentile over a sorted vector.
double percentile(const std::vector<double>& sorted, double q) {
  const size_t rank = static_cast<size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  return sorted[std::max<size_t>(rank, 1) - 1];
}

}  // namespace

TtdStats ttd_stats(const std::vector<std::pair<Label, StreamingOutcome>>& gold_outcomes) {
  std::vector<double> ttds;
  for (const auto& [gold, outcome] : gold_outcomes) {
    if (gold != Label::Unsafe || !outcome.ttd) continue;
    ttds.push_back(*outcome.ttd * 100.0);
  }
  TtdStats stats;
  stats.n_detected = ttds.size();
  if (ttds.empty()) return stats;
  double sum = 0.0;
  for (const double t : ttds) sum += t;
  stats.mean = sum / static_cast<double>(ttds.size());
  std::sort(ttds.begin(), ttds.end());
  stats.p50 = percentile(ttds, 0.50);
  stats.p95 = percentile(ttds, 0.95);
  return stats;
}

std::optional<double> mean_ttd(
    const std::vector<std::pair<Label, StreamingOutcome>>& gold_outcomes) {
  return ttd_stats(gold_outcomes).mean;
}

double bce_loss(const std::vector<std::pair<double, Label>>& pairs) {
  constexpr double kEps = 1e-12;
  double sum = 0.0;
  for (const auto& [p_raw, gold] : pairs) {
    const double p = std::clamp(p_raw, kEps, 1.0 - kEps);
    sum -= gold == Label::Unsafe ? std::log(p) : std::log(1.0 - p);
  }
  return sum;
}

double round_half_even(double value, int decimals) {
  if (!std::isfinite(value)) return value;
  const double scale = std::pow(10.0, decimals);
  // nearbyint under the default FE_TONEAREST mode resolves ties to even.
  return std::nearbyint(value * scale) / scale;
}

nlohmann::json MetricsReport::to_json() const {
  const auto rounded = [](const std::optional<double>& v) {
    return v ? nlohmann::json(round_half_even(*v, 2)) : nlohmann::json(nullptr);
  };
  return nlohmann::json{
      {"counts",
       {{"tp", counts.tp},
        {"fp", counts.fp},
        {"tn", counts.tn},
        {"fn", counts.fn},
        {"errored", counts.errored}}},
      {"precision", rounded(precision)},
      {"recall", rounded(recall)},
      {"f1", rounded(f1)},
      {"fpr", rounded(fpr)},
      {"fnr", rounded(fnr)},
      {"ber", rounded(ber)},
      {"accuracy", rounded(accuracy)},
      {"mean_ttd", rounded(mean_ttd)},
      {"ttd_p50", rounded(ttd_p50)},
      {"ttd_p95", rounded(ttd_p95)},
      {"n_detected_unsafe", n_detected_unsafe},
  };
}

const char* regime_name(Regime r) { return r == Regime::Offline ? "offline" : "streaming"; }

std::vector<SweepPoint> threshold_sweep(const std::vector<ScoreTrace>& traces,
                                        const std::vector<double>& taus, Regime regime) {
  for (const auto& t : traces)
    if (t.prefix_scores.empty())
      throw ValidationError(fmt::format("trace '{}' has no scores", t.id));

  std::vector<SweepPoint> points;
  points.reserve(taus.size());
  for (const double tau : taus) {
    std::vector<std::pair<Label, Label>> gold_pred;
    std::vector<std::pair<Label, StreamingOutcome>> gold_outcomes;
    gold_pred.reserve(traces.size());
    for (const auto& trace : traces) {
      if (regime == Regime::Offline) {
        gold_pred.emplace_back(trace.gold, decide(trace.prefix_scores.back().second, tau));
        continue;
      }
      StreamingOutcome out;
      out.response_length = trace.length;
      for (const auto& [k, p] : trace.prefix_scores) {
        if (decide(p, tau) == Label::Unsafe) {
          out.final = Label::Unsafe;
          out.detection_k = k;
          out.ttd = static_cast<double>(k) / static_cast<double>(trace.length);
          break;
        }
      }
      gold_pred.emplace_back(trace.gold, out.final);
      gold_outcomes.emplace_back(trace.gold, std::move(out));
    }
    SweepPoint point;
    point.tau = tau;
    point.regime = regime;
    point.report = rates(confusion(gold_pred));
    if (regime == Regime::Streaming) {
      const TtdStats stats = ttd_stats(gold_outcomes);
      point.report.mean_ttd = stats.mean;
      point.report.ttd_p50 = stats.p50;
      point.report.ttd_p95 = stats.p95;
      point.report.n_detected_unsafe = stats.n_detected;
    }
    points.push_back(std::move(point));
  }
  return points;
}

std::vector<double> default_taus() {
  std::vector<double> taus;
  for (int i = 1; i <= 19; ++i) taus.push_back(static_cast<double>(i) * 0.05);
  return taus;
}

namespace {

void csv_row(std::string& out, double tau, const char* metric, Regime regime,
             const std::optional<double>& value) {
  if (!value) return;  // undefined rates are omitted, never written as 0
  out += fmt::format("{:.2f},{},{},{:.2f}\n", round_half_even(tau, 2), metric,
                     regime_name(regime), round_half_even(*value, 2));
}

std::string cell(const std::optional<double>& v) {
  return v ? fmt::format("{:.2f}", round_half_even(*v, 2)) : std::string("-");
}

}  // namespace

std::string sweep_csv(const std::vector<SweepPoint>& points) {
  std::string out = "tau,metric,regime,value\n";
  for (const auto& p : points) {
    csv_row(out, p.tau, "f1", p.regime, p.report.f1);
    csv_row(out, p.tau, "precision", p.regime, p.report.precision);
    csv_row(out, p.tau, "recall", p.regime, p.report.recall);
    csv_row(out, p.tau, "fpr", p.regime, p.report.fpr);
    csv_row(out, p.tau, "fnr", p.regime, p.report.fnr);
    csv_row(out, p.tau, "ber", p.regime, p.report.ber);
    csv_row(out, p.tau, "accuracy", p.regime, p.report.accuracy);
    csv_row(out, p.tau, "mean_ttd", p.regime, p.report.mean_ttd);
  }
  return out;
}

std::string comparison_table(const MetricsReport& offline, const MetricsReport& streaming) {
  std::optional<double> delta;
  if (offline.f1 && streaming.f1) delta = *offline.f1 - *streaming.f1;
  std::string out;
  out += fmt::format("{:>10} {:>10} {:>8} {:>10} {:>10} {:>8}\n", "F1(off)", "F1(str)", "dF1",
                     "BER(off)", "BER(str)", "TTD");
  out += fmt::format("{:>10} {:>10} {:>8} {:>10} {:>10} {:>8}\n", cell(offline.f1),
                     cell(streaming.f1), cell(delta), cell(offline.ber), cell(streaming.ber),
                     cell(streaming.mean_ttd));
  return out;
}

}  // namespace guardvec
