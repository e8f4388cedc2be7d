// SPDX-License-Identifier: Apache-2.0
#include "guardvec/prefix.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <fstream>
#include <random>

#include "guardvec/errors.hpp"
#include "guardvec/text.hpp"

namespace guardvec {

using nlohmann::json;
namespace fs = std::filesystem;

const char* label_name(Label l) { return l == Label::Safe ? "SAFE" : "UNSAFE"; }

std::optional<Label> label_from_name(std::string_view name) {
  if (name == "SAFE") return Label::Safe;
  if (name == "UNSAFE") return Label::Unsafe;
  return std::nullopt;
}

std::vector<uint64_t> prefix_schedule(uint64_t length, uint64_t step) {
  if (length == 0) throw ValidationError("prefix schedule needs a positive length");
  if (step == 0) throw ValidationError("prefix schedule needs a positive step");
  std::vector<uint64_t> out;
  for (uint64_t k = step; k < length; k += step) out.push_back(k);
  out.push_back(length);
  return out;
}

LabelTrace assign_prefix_labels(const LabeledResponse& resp,
                                const std::vector<uint64_t>& schedule) {
  LabelTrace trace;
  trace.response_id = resp.id;
  if (resp.label == Label::Unsafe && !resp.first_unsafe_char) {
    trace.validity = TraceValidity::UnsafeNoDetectedPrefix;
    return trace;
  }
  trace.entries.reserve(schedule.size());
  for (const uint64_t k : schedule) {
    Label l = Label::Safe;
    if (resp.label == Label::Unsafe && k >= *resp.first_unsafe_char) l = Label::Unsafe;
    trace.entries.emplace_back(k, l);
  }
  trace.validity = classify_trace(trace.entries);
  return trace;
}

TraceValidity classify_trace(const std::vector<std::pair<uint64_t, Label>>& entries) {
  for (size_t i = 1; i < entries.size(); ++i) {
    if (entries[i - 1].second == Label::Unsafe && entries[i].second == Label::Safe)
      return TraceValidity::NonMonotone;
  }
  return TraceValidity::Valid;
}

std::vector<PrefixSample> build_prefixes(const LabeledResponse& resp, const LabelTrace& trace) {
  if (trace.validity != TraceValidity::Valid)
    throw ValidationError(fmt::format("response '{}': cannot expand an invalid label trace", resp.id));

  // One segmentation pass; every prefix is then a byte slice at a break.
  const std::vector<size_t> breaks = text::grapheme_breaks(resp.text);
  const size_t length = breaks.empty() ? 0 : breaks.size() - 1;

  std::vector<PrefixSample> out;
  out.reserve(trace.entries.size());
  for (const auto& [k, label] : trace.entries) {
    if (k > length)
      throw ValidationError(fmt::format("response '{}': schedule point {} beyond {} characters",
                                        resp.id, k, length));
    PrefixSample s;
    s.response_id = resp.id;
    s.k = k;
    s.text_prefix = resp.text.substr(0, breaks[k]);
    s.label = label;
    s.category = resp.category;
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

// Unbiased draw in [0, n) from the engine's raw 64-bit output. Avoids
// uniform_int_distribution, whose mapping differs across standard libraries.
uint64_t bounded_draw(std::mt19937_64& rng, uint64_t n) {
  const uint64_t reject_below = (~n + 1) % n;  // 2^64 mod n
  uint64_t x = rng();
  while (x < reject_below) x = rng();
  return x % n;
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Picks `keep` of `total` indices uniformly without replacement and returns
// them sorted, so survivors keep their input order.
std::vector<uint64_t> sample_indices(uint64_t total, uint64_t keep, std::mt19937_64& rng) {
  std::vector<uint64_t> idx(total);
  for (uint64_t i = 0; i < total; ++i) idx[i] = i;
  for (uint64_t i = 0; i < keep; ++i) {
    const uint64_t j = i + bounded_draw(rng, total - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

RebalanceResult rebalance(const std::vector<PrefixSample>& pool, uint64_t seed, BalanceMode mode) {
  RebalanceResult result;
  if (mode == BalanceMode::None) {
    result.samples = pool;
    return result;
  }

  // Group -> indices into `pool`, in input order.
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < pool.size(); ++i) {
    const std::string& g = (mode == BalanceMode::PerCategory) ? pool[i].category : std::string();
    groups[g].push_back(i);
  }

  std::vector<bool> kept(pool.size(), false);
  for (const auto& [name, members] : groups) {
    std::vector<size_t> safe, unsafe;
    for (const size_t i : members)
      (pool[i].label == Label::Safe ? safe : unsafe).push_back(i);
    if (safe.empty() || unsafe.empty()) {
      result.warnings.push_back(fmt::format(
          "group '{}' dropped: {} SAFE / {} UNSAFE, cannot balance", name, safe.size(), unsafe.size()));
      continue;
    }
    const uint64_t m = std::min(safe.size(), unsafe.size());
    auto& majority = safe.size() > unsafe.size() ? safe : unsafe;
    auto& minority = safe.size() > unsafe.size() ? unsafe : safe;
    for (const size_t i : minority) kept[i] = true;
    std::mt19937_64 rng(seed ^ fnv1a(name));
    for (const uint64_t at : sample_indices(majority.size(), m, rng)) kept[majority[at]] = true;
  }

  result.samples.reserve(pool.size());
  for (size_t i = 0; i < pool.size(); ++i) {
    if (kept[i]) result.samples.push_back(pool[i]);
  }
  return result;
}

BuildResult build_prefix_pool(const std::vector<LabeledResponse>& responses, uint64_t step,
                              uint64_t seed, BalanceMode mode) {
  BuildResult result;
  std::vector<PrefixSample> pool;
  for (const auto& resp : responses) {
    const uint64_t length = text::grapheme_count(resp.text);
    if (length == 0) {
      ++result.stats.discarded_empty_text;
      continue;
    }
    const LabelTrace trace = assign_prefix_labels(resp, prefix_schedule(length, step));
    if (trace.validity == TraceValidity::UnsafeNoDetectedPrefix) {
      ++result.stats.discarded_unsafe_no_prefix;
      continue;
    }
    if (trace.validity == TraceValidity::NonMonotone) {
      ++result.stats.discarded_non_monotone;
      continue;
    }
    auto& cat = result.stats.by_category[resp.category];
    (resp.label == Label::Safe ? cat.responses_safe : cat.responses_unsafe) += 1;
    for (auto& sample : build_prefixes(resp, trace)) {
      (sample.label == Label::Safe ? cat.prefixes_safe : cat.prefixes_unsafe) += 1;
      pool.push_back(std::move(sample));
    }
  }

  RebalanceResult balanced = rebalance(pool, seed, mode);
  result.stats.warnings = std::move(balanced.warnings);
  for (const auto& sample : balanced.samples) {
    auto& cat = result.stats.by_category[sample.category];
    (sample.label == Label::Safe ? cat.balanced_safe : cat.balanced_unsafe) += 1;
  }
  result.samples = std::move(balanced.samples);
  return result;
}

json PoolStats::to_json() const {
  json cats = json::object();
  for (const auto& [name, c] : by_category) {
    cats[name] = {{"responses", {{"safe", c.responses_safe}, {"unsafe", c.responses_unsafe}}},
                  {"prefixes", {{"safe", c.prefixes_safe}, {"unsafe", c.prefixes_unsafe}}},
                  {"balanced", {{"safe", c.balanced_safe}, {"unsafe", c.balanced_unsafe}}}};
  }
  return json{{"by_category", cats},
              {"discarded",
               {{"unsafe_no_detected_prefix", discarded_unsafe_no_prefix},
                {"non_monotone", discarded_non_monotone},
                {"empty_text", discarded_empty_text}}},
              {"warnings", warnings}};
}

namespace {

json parse_line(const std::string& line, size_t lineno, const fs::path& path) {
  const json doc = json::parse(line, nullptr, false);
  if (doc.is_discarded() || !doc.is_object())
    throw ValidationError(fmt::format("{}:{}: line is not a JSON object", path.string(), lineno));
  return doc;
}

std::string require_string(const json& doc, const char* field, size_t lineno, const fs::path& path) {
  if (!doc.contains(field) || !doc[field].is_string())
    throw ValidationError(fmt::format("{}:{}: missing string field '{}'", path.string(), lineno, field));
  return doc[field].get<std::string>();
}

}  // namespace

std::vector<LabeledResponse> read_labeled_responses(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot open dataset '{}'", path.string()));
  std::vector<LabeledResponse> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const json doc = parse_line(line, lineno, path);

    LabeledResponse r;
    r.id = require_string(doc, "id", lineno, path);
    r.text = require_string(doc, "text", lineno, path);
    if (!text::valid_utf8(r.text))
      throw ValidationError(fmt::format("{}:{}: text is not valid UTF-8", path.string(), lineno));
    const auto label = label_from_name(require_string(doc, "label", lineno, path));
    if (!label)
      throw ValidationError(fmt::format("{}:{}: label must be SAFE or UNSAFE", path.string(), lineno));
    r.label = *label;
    if (doc.contains("first_unsafe_char") && !doc["first_unsafe_char"].is_null()) {
      if (!doc["first_unsafe_char"].is_number_unsigned() || doc["first_unsafe_char"] == 0)
        throw ValidationError(fmt::format("{}:{}: first_unsafe_char must be a positive integer",
                                          path.string(), lineno));
      r.first_unsafe_char = doc["first_unsafe_char"].get<uint64_t>();
      if (r.label == Label::Safe)
        throw ValidationError(fmt::format("{}:{}: SAFE responses cannot carry first_unsafe_char",
                                          path.string(), lineno));
      if (*r.first_unsafe_char > text::grapheme_count(r.text))
        throw ValidationError(fmt::format("{}:{}: first_unsafe_char {} exceeds the {}-character text",
                                          path.string(), lineno, *r.first_unsafe_char,
                                          text::grapheme_count(r.text)));
    }
    if (doc.contains("category") && doc["category"].is_string())
      r.category = doc["category"].get<std::string>();
    if (doc.contains("language") && doc["language"].is_string())
      r.language = doc["language"].get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

void write_prefix_samples(const std::vector<PrefixSample>& samples, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure(fmt::format("cannot create '{}'", path.string()));
  for (const auto& s : samples) {
    const json doc{{"response_id", s.response_id},
                   {"k", s.k},
                   {"text_prefix", s.text_prefix},
                   {"label", label_name(s.label)},
                   {"category", s.category}};
    out << doc.dump() << '\n';
  }
  if (!out) throw RuntimeFailure(fmt::format("write failed for '{}'", path.string()));
}

std::vector<PrefixSample> read_prefix_samples(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot open prefix pool '{}'", path.string()));
  std::vector<PrefixSample> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const json doc = parse_line(line, lineno, path);
    PrefixSample s;
    s.response_id = require_string(doc, "response_id", lineno, path);
    if (!doc.contains("k") || !doc["k"].is_number_unsigned())
      throw ValidationError(fmt::format("{}:{}: missing unsigned field 'k'", path.string(), lineno));
    s.k = doc["k"].get<uint64_t>();
    s.text_prefix = require_string(doc, "text_prefix", lineno, path);
    const auto label = label_from_name(require_string(doc, "label", lineno, path));
    if (!label)
      throw ValidationError(fmt::format("{}:{}: label must be SAFE or UNSAFE", path.string(), lineno));
    s.label = *label;
    if (doc.contains("category") && doc["category"].is_string())
      s.category = doc["category"].get<std::string>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace guardvec
