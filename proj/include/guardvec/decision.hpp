// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "guardvec/label.hpp"

namespace guardvec {

/// Raw two-way classification logits for the reserved safe/unsafe labels.
struct LabelLogits {
  double z_safe = 0.0;
  double z_unsafe = 0.0;
};

enum class VerdictSource : uint8_t { SingleToken, GenerationParse };

/// One classifier decision. Single-token verdicts always carry the
/// probability that produced them; parsed-generation verdicts never do.
struct Verdict {
  Label decision = Label::Safe;
  std::optional<double> p_unsafe;
  VerdictSource source = VerdictSource::SingleToken;
  bool parse_failure = false;  // GenerationParse only: fallback was used
};

/// Streaming evaluation of one response: verdicts per prefix, stopping at
/// the first UNSAFE. `ttd` is detection_K / response_length, in (0, 1].
struct StreamingOutcome {
  Label final = Label::Safe;
  std::optional<uint64_t> detection_k;
  uint64_t response_length = 0;  // characters
  std::optional<double> ttd;
  std::vector<std::pair<uint64_t, Verdict>> per_prefix;
};

/// Cached per-prefix scores for one sample, recorded without early
/// termination so any threshold can be replayed later. Entries follow the
/// prefix schedule; the last one covers the full text and doubles as the
/// offline score.
struct ScoreTrace {
  std::string id;
  Label gold = Label::Safe;
  uint64_t length = 0;  // characters
  std::vector<std::pair<uint64_t, double>> prefix_scores;
};

/// Probability of the UNSAFE label from a two-way softmax, computed in the
/// max-subtracted form so extreme logits cannot overflow.
/// Throws ValidationError on non-finite input.
double p_unsafe(const LabelLogits& logits);

/// The thresholded decision: UNSAFE iff p >= tau. The boundary is inclusive.
Label decide(double p, double tau);

/// How to read a textual judgment. The first line of the generation is
/// trimmed and compared case-insensitively against the two markers.
struct ParseSchema {
  std::string safe_marker = "safe";
  std::string unsafe_marker = "unsafe";
  Label fallback = Label::Safe;
};

/// Parse a generated judgment ("unsafe\nS9" style). Output that matches
/// neither marker maps to the schema fallback with parse_failure set;
/// nothing throws.
Verdict parse_generation(const std::string& text, const ParseSchema& schema = {});

}  // namespace guardvec
