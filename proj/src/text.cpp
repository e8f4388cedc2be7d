// SPDX-License-Identifier: Apache-2.0
#include "guardvec/text.hpp"

#include <algorithm>
#include <array>

namespace guardvec::text {

namespace {

struct Decoded {
  uint32_t cp = 0;
  uint8_t len = 1;  // bytes consumed
  bool valid = false;
};

// Strict UTF-8 decode of the sequence starting at `at`. Rejects overlong
// forms, surrogates, and values beyond U+10FFFF; the caller then consumes a
// single byte.
Decoded decode(std::string_view s, size_t at) {
  const auto b = [&](size_t i) { return static_cast<uint8_t>(s[at + i]); };
  const size_t left = s.size() - at;
  const uint8_t b0 = b(0);
  if (b0 < 0x80) return {b0, 1, true};
  const auto cont = [&](size_t i) { return i < left && (b(i) & 0xC0) == 0x80; };
  if ((b0 & 0xE0) == 0xC0) {
    if (!cont(1)) return {};
    const uint32_t cp = (uint32_t(b0 & 0x1F) << 6) | (b(1) & 0x3F);
    if (cp < 0x80) return {};
    return {cp, 2, true};
  }
  if ((b0 & 0xF0) == 0xE0) {
    if (!cont(1) || !cont(2)) return {};
    const uint32_t cp = (uint32_t(b0 & 0x0F) << 12) | (uint32_t(b(1) & 0x3F) << 6) | (b(2) & 0x3F);
    if (cp < 0x800 || (cp >= 0xD800 && cp <= 0xDFFF)) return {};
    return {cp, 3, true};
  }
  if ((b0 & 0xF8) == 0xF0) {
    if (!cont(1) || !cont(2) || !cont(3)) return {};
    const uint32_t cp = (uint32_t(b0 & 0x07) << 18) | (uint32_t(b(1) & 0x3F) << 12) |
                        (uint32_t(b(2) & 0x3F) << 6) | (b(3) & 0x3F);
    if (cp < 0x10000 || cp > 0x10FFFF) return {};
    return {cp, 4, true};
  }
  return {};
}

enum class Cls : uint8_t { Other, CR, LF, Control, Extend, ZWJ, RI, HangulL, HangulV, HangulT, HangulLV, HangulLVT };

struct Range {
  uint32_t lo, hi;
};

// Combining marks and other cluster-extending ranges. A pragmatic subset of
// the full property data: common combining blocks, variation selectors, and
// emoji modifiers.
constexpr std::array<Range, 34> kExtend = {{
    {0x0300, 0x036F},    // combining diacritical marks
    {0x0483, 0x0489},
    {0x0591, 0x05BD},
    {0x05BF, 0x05BF},
    {0x05C1, 0x05C2},
    {0x05C4, 0x05C5},
    {0x05C7, 0x05C7},
    {0x0610, 0x061A},
    {0x064B, 0x065F},
    {0x0670, 0x0670},
    {0x06D6, 0x06DC},
    {0x06DF, 0x06E4},
    {0x06E7, 0x06E8},
    {0x06EA, 0x06ED},
    {0x0711, 0x0711},
    {0x0730, 0x074A},
    {0x07A6, 0x07B0},
    {0x07EB, 0x07F3},
    {0x0900, 0x0902},
    {0x093A, 0x093A},
    {0x093C, 0x093C},
    {0x0941, 0x0948},
    {0x094D, 0x094D},
    {0x0951, 0x0957},
    {0x0962, 0x0963},
    {0x0E31, 0x0E31},
    {0x0E34, 0x0E3A},
    {0x0E47, 0x0E4E},
    {0x1AB0, 0x1AFF},    // combining extensions
    {0x1DC0, 0x1DFF},    // combining supplement
    {0x20D0, 0x20FF},    // combining for symbols
    {0xFE00, 0xFE0F},    // variation selectors
    {0xFE20, 0xFE2F},    // combining half marks
    {0x1F3FB, 0x1F3FF},  // emoji modifiers
}};

constexpr std::array<Range, 9> kControl = {{
    {0x0000, 0x001F},  // C0 controls; CR and LF are classified first
    {0x007F, 0x009F},
    {0x061C, 0x061C},
    {0x200B, 0x200B},
    {0x200E, 0x200F},
    {0x2028, 0x202E},
    {0x2060, 0x206F},
    {0xFEFF, 0xFEFF},
    {0xFFF9, 0xFFFB},
}};

bool in_ranges(uint32_t cp, const Range* ranges, size_t n) {
  const Range* end = ranges + n;
  const Range* it = std::lower_bound(ranges, end, cp, [](const Range& r, uint32_t v) { return r.hi < v; });
  return it != end && cp >= it->lo;
}

Cls classify(uint32_t cp) {
  if (cp == 0x0D) return Cls::CR;
  if (cp == 0x0A) return Cls::LF;
  if (cp == 0x200D) return Cls::ZWJ;
  if (cp >= 0x1F1E6 && cp <= 0x1F1FF) return Cls::RI;
  if ((cp >= 0x1100 && cp <= 0x115F) || (cp >= 0xA960 && cp <= 0xA97C)) return Cls::HangulL;
  if ((cp >= 0x1160 && cp <= 0x11A7) || (cp >= 0xD7B0 && cp <= 0xD7C6)) return Cls::HangulV;
  if ((cp >= 0x11A8 && cp <= 0x11FF) || (cp >= 0xD7CB && cp <= 0xD7FB)) return Cls::HangulT;
  if (cp >= 0xAC00 && cp <= 0xD7A3)
    return ((cp - 0xAC00) % 28 == 0) ? Cls::HangulLV : Cls::HangulLVT;
  if (in_ranges(cp, kExtend.data(), kExtend.size())) return Cls::Extend;
  if (in_ranges(cp, kControl.data(), kControl.size())) return Cls::Control;
  return Cls::Other;
}

// Break decision between adjacent classified units. `ri_parity` counts the
// regional indicators already joined into the current cluster.
bool breaks_between(Cls prev, Cls next, int ri_parity) {
  if (prev == Cls::CR && next == Cls::LF) return false;
  if (prev == Cls::CR || prev == Cls::LF || prev == Cls::Control) return true;
  if (next == Cls::CR || next == Cls::LF || next == Cls::Control) return true;
  if (next == Cls::Extend || next == Cls::ZWJ) return false;
  if (prev == Cls::ZWJ) return false;  // simplified join rule, superset of emoji sequences
  switch (prev) {
    case Cls::HangulL:
      if (next == Cls::HangulL || next == Cls::HangulV || next == Cls::HangulLV ||
          next == Cls::HangulLVT)
        return false;
      break;
    case Cls::HangulLV:
    case Cls::HangulV:
      if (next == Cls::HangulV || next == Cls::HangulT) return false;
      break;
    case Cls::HangulLVT:
    case Cls::HangulT:
      if (next == Cls::HangulT) return false;
      break;
    default: break;
  }
  if (prev == Cls::RI && next == Cls::RI && ri_parity % 2 == 1) {
    return false;  // pair the second indicator with the first
  }
  return true;
}

// Walks cluster starts, invoking `on_break(byte_offset) -> bool` at the
// start of every cluster after the first; a false return stops the walk.
// Invalid bytes are Control-classified so they always stand alone.
template <typename F>
void walk(std::string_view s, F&& on_break) {
  size_t i = 0;
  Cls prev = Cls::Other;
  int ri_run = 0;
  bool first = true;
  while (i < s.size()) {
    const Decoded d = decode(s, i);
    const Cls cls = d.valid ? classify(d.cp) : Cls::Control;
    const bool brk = first || breaks_between(prev, cls, ri_run);
    if (!first && brk && !on_break(i)) return;
    if (brk) ri_run = 0;
    if (cls == Cls::RI) ++ri_run;
    prev = cls;
    first = false;
    i += d.valid ? d.len : 1;
  }
}

}  // namespace

size_t grapheme_count(std::string_view text) {
  if (text.empty()) return 0;
  size_t clusters = 1;
  walk(text, [&](size_t) {
    ++clusters;
    return true;
  });
  return clusters;
}

size_t grapheme_prefix_bytes(std::string_view text, size_t clusters) {
  if (clusters == 0 || text.empty()) return 0;
  size_t seen = 1;
  size_t end = text.size();
  walk(text, [&](size_t at) {
    if (seen == clusters) {
      end = at;
      return false;
    }
    ++seen;
    return true;
  });
  return end;
}

std::vector<size_t> grapheme_breaks(std::string_view text) {
  std::vector<size_t> out{0};
  walk(text, [&](size_t at) {
    out.push_back(at);
    return true;
  });
  if (!text.empty()) out.push_back(text.size());
  return out;
}

bool valid_utf8(std::string_view bytes) {
  size_t i = 0;
  while (i < bytes.size()) {
    const Decoded d = decode(bytes, i);
    if (!d.valid) return false;
    i += d.len;
  }
  return true;
}

}  // namespace guardvec::text
