// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "guardvec/label.hpp"

namespace guardvec {

/// A full response with its ground-truth annotation. `first_unsafe_char` is a
/// 1-based character index (grapheme clusters, like every length here) and is
/// an input annotation, never computed by this library.
struct LabeledResponse {
  std::string id;
  std::string text;
  Label label = Label::Safe;
  std::optional<uint64_t> first_unsafe_char;
  std::string category;  // optional risk-category tag
  std::string language;  // optional language tag
};

/// One prefix row of the expanded pool.
struct PrefixSample {
  std::string response_id;
  uint64_t k = 0;           // prefix length in characters
  std::string text_prefix;  // exactly the first k characters
  Label label = Label::Safe;
  std::string category;
};

enum class TraceValidity : uint8_t { Valid, NonMonotone, UnsafeNoDetectedPrefix };

/// Per-response labels along the schedule, plus whether the sequence is
/// usable: labels must never fall back from UNSAFE to SAFE.
struct LabelTrace {
  std::string response_id;
  std::vector<std::pair<uint64_t, Label>> entries;  // (K, label), K increasing
  TraceValidity validity = TraceValidity::Valid;
};

/// {step, 2·step, ...} clipped to [1, length], with length appended when not
/// already the last multiple. Strictly increasing, never empty, always ends
/// at length.
std::vector<uint64_t> prefix_schedule(uint64_t length, uint64_t step);

/// Labels every schedule point by inheritance: SAFE responses give all-SAFE
/// traces; UNSAFE responses are SAFE strictly before first_unsafe_char and
/// UNSAFE from it on; UNSAFE without the annotation is classified
/// UnsafeNoDetectedPrefix and meant to be discarded.
LabelTrace assign_prefix_labels(const LabeledResponse& resp,
                                const std::vector<uint64_t>& schedule);

/// Valid iff the label sequence never steps from UNSAFE back to SAFE.
TraceValidity classify_trace(const std::vector<std::pair<uint64_t, Label>>& entries);

/// Expands a Valid trace into one sample per schedule point. Slicing counts
/// characters, not bytes. Throws ValidationError on an invalid trace.
std::vector<PrefixSample> build_prefixes(const LabeledResponse& resp, const LabelTrace& trace);

enum class BalanceMode : uint8_t { None, Global, PerCategory };

struct RebalanceResult {
  std::vector<PrefixSample> samples;
  /// Groups dropped because one class was empty, with the counts they had.
  std::vector<std::string> warnings;
};

/// Downsamples the majority class to the minority count within each group
/// (one global group, or one per category). Uniform without replacement,
/// deterministic in `seed`, survivor order preserved. A group with zero of
/// either class is dropped entirely and recorded in `warnings`.
RebalanceResult rebalance(const std::vector<PrefixSample>& pool, uint64_t seed, BalanceMode mode);

/// Per-category tallies for the stats report.
struct CategoryStats {
  uint64_t responses_safe = 0;
  uint64_t responses_unsafe = 0;
  uint64_t prefixes_safe = 0;
  uint64_t prefixes_unsafe = 0;
  uint64_t balanced_safe = 0;
  uint64_t balanced_unsafe = 0;
};

struct PoolStats {
  std::map<std::string, CategoryStats> by_category;
  uint64_t discarded_unsafe_no_prefix = 0;
  uint64_t discarded_non_monotone = 0;
  uint64_t discarded_empty_text = 0;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

struct BuildResult {
  std::vector<PrefixSample> samples;
  PoolStats stats;
};

/// Full pipeline over a dataset: schedule, label traces, expansion, and
/// rebalancing. Responses with empty text or unusable traces are counted and
/// skipped, never fatal.
BuildResult build_prefix_pool(const std::vector<LabeledResponse>& responses, uint64_t step,
                              uint64_t seed, BalanceMode mode);

/// JSONL input: one LabeledResponse object per line. Malformed lines throw
/// ValidationError naming the line number.
std::vector<LabeledResponse> read_labeled_responses(const std::filesystem::path& path);

/// JSONL output, one PrefixSample per line, byte-deterministic.
void write_prefix_samples(const std::vector<PrefixSample>& samples,
                          const std::filesystem::path& path);
std::vector<PrefixSample> read_prefix_samples(const std::filesystem::path& path);

}  // namespace guardvec
