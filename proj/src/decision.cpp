// SPDX-License-Identifier: Apache-2.0
#include "guardvec/decision.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cctype>
#include <cmath>

#include "guardvec/errors.hpp"

namespace guardvec {

double p_unsafe(const LabelLogits& logits) {
  if (!std::isfinite(logits.z_safe) || !std::isfinite(logits.z_unsafe)) {
    throw ValidationError(fmt::format("non-finite label logits: z_safe={}, z_unsafe={}",
                                      logits.z_safe, logits.z_unsafe));
  }
  const double m = std::max(logits.z_safe, logits.z_unsafe);
  const double es = std::exp(logits.z_safe - m);
  const double eu = std::exp(logits.z_unsafe - m);
  return eu / (es + eu);
}

Label decide(double p, double tau) {
  return p >= tau ? Label::Unsafe : Label::Safe;
}

namespace {

std::string first_line_lower(const std::string& text) {
  size_t end = text.find('\n');
  if (end == std::string::npos) end = text.size();
  size_t begin = 0;
  while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
  while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
  std::string line = text.substr(begin, end - begin);
  std::transform(line.begin(), line.end(), line.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return line;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

Verdict parse_generation(const std::string& text, const ParseSchema& schema) {
  Verdict v;
  v.source = VerdictSource::GenerationParse;
  const std::string line = first_line_lower(text);
  if (line == lower(schema.unsafe_marker)) {
    v.decision = Label::Unsafe;
  } else if (line == lower(schema.safe_marker)) {
    v.decision = Label::Safe;
  } else {
    v.decision = schema.fallback;
    v.parse_failure = true;
  }
  return v;
}

}  // namespace guardvec
