// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace guardvec::text {

/// Character units are extended grapheme clusters under a compact, documented
/// segmentation: CR+LF, combining marks and variation selectors attach to
/// their base, ZWJ joins its neighbors, regional indicators pair up, and
/// Hangul jamo compose. Invalid UTF-8 bytes are isolated single-byte
/// clusters. This keeps prefix slicing from splitting user-visible
/// characters, including multi-byte CJK and emoji sequences.

/// Number of grapheme clusters in `text`.
size_t grapheme_count(std::string_view text);

/// Byte length of the prefix holding the first `clusters` grapheme clusters
/// (the whole string when it has fewer).
size_t grapheme_prefix_bytes(std::string_view text, size_t clusters);

/// First `clusters` grapheme clusters as a view into `text`.
inline std::string_view grapheme_prefix(std::string_view text, size_t clusters) {
  return text.substr(0, grapheme_prefix_bytes(text, clusters));
}

/// Byte offsets where each cluster starts, plus text.size() as the final
/// entry. Empty text gives {0}.
std::vector<size_t> grapheme_breaks(std::string_view text);

/// True when `bytes` is well-formed UTF-8 throughout.
bool valid_utf8(std::string_view bytes);

}  // namespace guardvec::text
