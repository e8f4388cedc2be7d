// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <optional>
#include <string_view>

namespace guardvec {

// Storage dtypes of checkpoint tensors. All pipeline arithmetic happens in
// 64-bit floats; these only describe the on-disk element encoding.
enum class DType : uint8_t { F16, BF16, F32 };

constexpr size_t dtype_width(DType d) {
  switch (d) {
    case DType::F16:
    case DType::BF16: return 2;
    case DType::F32: return 4;
  }
  return 0;
}

constexpr std::string_view dtype_name(DType d) {
  switch (d) {
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F32: return "F32";
  }
  return "?";
}

constexpr std::optional<DType> dtype_from_name(std::string_view s) {
  if (s == "F16") return DType::F16;
  if (s == "BF16") return DType::BF16;
  if (s == "F32") return DType::F32;
  return std::nullopt;
}

namespace detail {

// Widen a small binary float (EXP_BITS exponent, MANT_BITS mantissa bits) to
// f64. Exact for every finite input. NaNs come out quiet with the payload's
// top bits preserved, matching x86 conversion-instruction semantics so the
// SIMD lanes agree with this reference bit for bit.
template <int EXP_BITS, int MANT_BITS>
constexpr double widen_bits(uint64_t in) {
  constexpr int BIAS = (1 << (EXP_BITS - 1)) - 1;
  constexpr uint32_t EXP_MAX = (1u << EXP_BITS) - 1;
  const uint64_t sign = ((in >> (EXP_BITS + MANT_BITS)) & 1) << 63;
  const auto e = static_cast<uint32_t>((in >> MANT_BITS) & EXP_MAX);
  const uint64_t m = in & ((1ull << MANT_BITS) - 1);
  uint64_t out = sign;
  if (e == EXP_MAX) {
    out |= 0x7FFull << 52;
    if (m != 0) out |= (m | (1ull << (MANT_BITS - 1))) << (52 - MANT_BITS);
  } else if (e == 0) {
    if (m != 0) {
      // Subnormal: m * 2^(EMIN - MANT_BITS), renormalized.
      const int k = 63 - std::countl_zero(m);
      const int ue = (1 - BIAS) - MANT_BITS + k;
      out |= (static_cast<uint64_t>(ue + 1023) << 52) |
             ((m ^ (1ull << k)) << (52 - k));
    }
  } else {
    out |= (static_cast<uint64_t>(static_cast<int>(e) - BIAS + 1023) << 52) |
           (m << (52 - MANT_BITS));
  }
  return std::bit_cast<double>(out);
}

// Narrow f64 to a smaller binary float with a single round-to-nearest-even.
// Direct bit algorithm: a cast chain through f32 double-rounds near storage
// rounding boundaries (overflow midpoint, subnormal ties). Overflow goes to
// +-inf, NaNs stay NaN (payload top bits kept, quiet bit forced).
template <int EXP_BITS, int MANT_BITS>
constexpr uint64_t narrow_bits(double v) {
  constexpr int BIAS = (1 << (EXP_BITS - 1)) - 1;
  constexpr int EMAX = BIAS;
  constexpr int EMIN = 1 - BIAS;
  constexpr uint64_t EXP_FIELD_MAX = static_cast<uint64_t>((1u << EXP_BITS) - 1)
                                     << MANT_BITS;
  constexpr uint64_t MANT_MASK = (1ull << MANT_BITS) - 1;
  const uint64_t b = std::bit_cast<uint64_t>(v);
  const uint64_t sign = (b >> 63) << (EXP_BITS + MANT_BITS);
  const auto e = static_cast<uint32_t>((b >> 52) & 0x7FF);
  const uint64_t m = b & ((1ull << 52) - 1);

  if (e == 0x7FF) {
    if (m == 0) return sign | EXP_FIELD_MAX;
    const uint64_t payload = (m >> (52 - MANT_BITS)) | (1ull << (MANT_BITS - 1));
    return sign | EXP_FIELD_MAX | payload;
  }
  if (e == 0 && m == 0) return sign;

  // value = sig * 2^(re - 52), sig normalized so bit 52 is set.
  uint64_t sig;
  int re;
  if (e == 0) {
    const int up = std::countl_zero(m) - 11;
    sig = m << up;
    re = 1 - 1023 - up;
  } else {
    sig = (1ull << 52) | m;
    re = static_cast<int>(e) - 1023;
  }

  if (re > EMAX) return sign | EXP_FIELD_MAX;

  int shift = 52 - MANT_BITS;
  if (re < EMIN) shift += EMIN - re;
  if (shift > 63) shift = 63;

  uint64_t keep = sig >> shift;
  const uint64_t round = (sig >> (shift - 1)) & 1;
  const uint64_t sticky = (sig & ((1ull << (shift - 1)) - 1)) != 0 ? 1u : 0u;
  keep += round & (sticky | (keep & 1));

  if (re < EMIN) return sign | keep;  // keep == 2^MANT_BITS encodes min normal

  if (keep == (1ull << (MANT_BITS + 1))) {
    keep >>= 1;
    re += 1;
    if (re > EMAX) return sign | EXP_FIELD_MAX;
  }
  return sign | (static_cast<uint64_t>(re + BIAS) << MANT_BITS) |
         (keep & MANT_MASK);
}

}  // namespace detail

constexpr double f16_to_f64(uint16_t bits) { return detail::widen_bits<5, 10>(bits); }
constexpr double bf16_to_f64(uint16_t bits) { return detail::widen_bits<8, 7>(bits); }
constexpr double f32_to_f64(uint32_t bits) { return detail::widen_bits<8, 23>(bits); }

constexpr uint16_t f64_to_f16(double v) {
  return static_cast<uint16_t>(detail::narrow_bits<5, 10>(v));
}
constexpr uint16_t f64_to_bf16(double v) {
  return static_cast<uint16_t>(detail::narrow_bits<8, 7>(v));
}
constexpr uint32_t f64_to_f32(double v) {
  return static_cast<uint32_t>(detail::narrow_bits<8, 23>(v));
}

}  // namespace guardvec
