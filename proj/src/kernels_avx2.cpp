// SPDX-License-Identifier: Apache-2.0
#include "guardvec/kernels.hpp"

#if defined(__AVX2__) && defined(__F16C__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>
#include <limits>

namespace guardvec::kernels {
namespace {

// ============================================================================
// Widening: storage dtype -> f64
// ============================================================================

void x_widen_f16(const uint16_t* in, double* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m128i h = _mm_loadu_si128(reinterpret_cast<const __m128i*>(in + i));
    const __m256 f = _mm256_cvtph_ps(h);
    _mm256_storeu_pd(out + i, _mm256_cvtps_pd(_mm256_castps256_ps128(f)));
    _mm256_storeu_pd(out + i + 4, _mm256_cvtps_pd(_mm256_extractf128_ps(f, 1)));
  }
  for (; i < n; ++i) out[i] = f16_to_f64(in[i]);
}

void x_widen_bf16(const uint16_t* in, double* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m128i h = _mm_loadu_si128(reinterpret_cast<const __m128i*>(in + i));
    const __m256i w = _mm256_slli_epi32(_mm256_cvtepu16_epi32(h), 16);
    const __m256 f = _mm256_castsi256_ps(w);
    _mm256_storeu_pd(out + i, _mm256_cvtps_pd(_mm256_castps256_ps128(f)));
    _mm256_storeu_pd(out + i + 4, _mm256_cvtps_pd(_mm256_extractf128_ps(f, 1)));
  }
  for (; i < n; ++i) out[i] = bf16_to_f64(in[i]);
}

void x_widen_f32(const uint32_t* in, double* out, size_t n) {
  size_t i = 0;
  const float* fin = reinterpret_cast<const float*>(in);
  for (; i + 8 <= n; i += 8) {
    const __m256 f = _mm256_loadu_ps(fin + i);
    _mm256_storeu_pd(out + i, _mm256_cvtps_pd(_mm256_castps256_ps128(f)));
    _mm256_storeu_pd(out + i + 4, _mm256_cvtps_pd(_mm256_extractf128_ps(f, 1)));
  }
  for (; i < n; ++i) out[i] = f32_to_f64(in[i]);
}

// ============================================================================
// Narrowing: f64 -> storage dtype
// ============================================================================

// f64 -> f32 bits with round-to-odd, four lanes at a time. Round-to-odd keeps
// the inexact bit in the result's LSB, so a following hardware RNE narrowing
// to f16/bf16 rounds exactly once overall (the intermediate never lands on a
// rounding midpoint unless the value is that midpoint). Results are u32 bit
// patterns packed into the low 128 bits.
__m128i rto_f64_to_f32_bits(__m256d v) {
  const __m256i b = _mm256_castpd_si256(v);
  const __m256i zero = _mm256_setzero_si256();
  const __m256i e = _mm256_and_si256(_mm256_srli_epi64(b, 52),
                                     _mm256_set1_epi64x(0x7FF));
  const __m256i m = _mm256_and_si256(b, _mm256_set1_epi64x((1ll << 52) - 1));
  const __m256i s32 = _mm256_and_si256(_mm256_srli_epi64(b, 32),
                                       _mm256_set1_epi64x(0x80000000ll));

  // Subnormal / underflow path (e <= 896): value in units of 2^-149.
  const __m256i implicit =
      _mm256_andnot_si256(_mm256_cmpeq_epi64(e, zero),
                          _mm256_set1_epi64x(1ll << 52));
  const __m256i full = _mm256_or_si256(m, implicit);
  __m256i shift = _mm256_sub_epi64(_mm256_set1_epi64x(926), e);
  const __m256i clamp = _mm256_cmpgt_epi64(shift, _mm256_set1_epi64x(63));
  shift = _mm256_blendv_epi8(shift, _mm256_set1_epi64x(63), clamp);
  const __m256i sub_keep = _mm256_srlv_epi64(full, shift);
  const __m256i sub_lost =
      _mm256_sllv_epi64(full, _mm256_sub_epi64(_mm256_set1_epi64x(64), shift));
  const __m256i sub_sticky =
      _mm256_andnot_si256(_mm256_cmpeq_epi64(sub_lost, zero),
                          _mm256_set1_epi64x(1));
  const __m256i sub_val =
      _mm256_or_si256(s32, _mm256_or_si256(sub_keep, sub_sticky));

  // Normal path (897 <= e <= 1150): truncate 29 mantissa bits, sticky to LSB.
  const __m256i keep = _mm256_srli_epi64(m, 29);
  const __m256i lost = _mm256_and_si256(m, _mm256_set1_epi64x(0x1FFFFFFF));
  const __m256i sticky = _mm256_andnot_si256(_mm256_cmpeq_epi64(lost, zero),
                                             _mm256_set1_epi64x(1));
  const __m256i norm_exp =
      _mm256_slli_epi64(_mm256_sub_epi64(e, _mm256_set1_epi64x(896)), 23);
  const __m256i norm_val = _mm256_or_si256(
      s32, _mm256_or_si256(norm_exp, _mm256_or_si256(keep, sticky)));

  // Overflow (e >= 1151): round-to-odd gives max finite (LSB already odd).
  const __m256i over_val =
      _mm256_or_si256(s32, _mm256_set1_epi64x(0x7F7FFFFFll));

  // Inf / NaN (e == 2047): keep payload top bits, force quiet.
  const __m256i nan_bits = _mm256_andnot_si256(
      _mm256_cmpeq_epi64(m, zero),
      _mm256_or_si256(_mm256_srli_epi64(m, 29),
                      _mm256_set1_epi64x(0x400000)));
  const __m256i special_val = _mm256_or_si256(
      s32, _mm256_or_si256(_mm256_set1_epi64x(0x7F800000ll), nan_bits));

  __m256i r = sub_val;
  r = _mm256_blendv_epi8(r, norm_val,
                         _mm256_cmpgt_epi64(e, _mm256_set1_epi64x(896)));
  r = _mm256_blendv_epi8(r, over_val,
                         _mm256_cmpgt_epi64(e, _mm256_set1_epi64x(1150)));
  r = _mm256_blendv_epi8(r, special_val,
                         _mm256_cmpeq_epi64(e, _mm256_set1_epi64x(0x7FF)));

  const __m256i packed = _mm256_permutevar8x32_epi32(
      r, _mm256_setr_epi32(0, 2, 4, 6, 0, 2, 4, 6));
  return _mm256_castsi256_si128(packed);
}

__m256i rto_f32_bits_8(const double* in) {
  const __m128i lo = rto_f64_to_f32_bits(_mm256_loadu_pd(in));
  const __m128i hi = rto_f64_to_f32_bits(_mm256_loadu_pd(in + 4));
  return _mm256_inserti128_si256(_mm256_castsi128_si256(lo), hi, 1);
}

void x_narrow_f16(const double* in, uint16_t* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 f = _mm256_castsi256_ps(rto_f32_bits_8(in + i));
    const __m128i h =
        _mm256_cvtps_ph(f, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    _mm_storeu_si128(reinterpret_cast<__m128i*>(out + i), h);
  }
  for (; i < n; ++i) out[i] = f64_to_f16(in[i]);
}

void x_narrow_bf16(const double* in, uint16_t* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256i v = rto_f32_bits_8(in + i);
    const __m256i abs32 = _mm256_and_si256(v, _mm256_set1_epi32(0x7FFFFFFF));
    const __m256i is_nan =
        _mm256_cmpgt_epi32(abs32, _mm256_set1_epi32(0x7F800000));
    const __m256i lsb =
        _mm256_and_si256(_mm256_srli_epi32(v, 16), _mm256_set1_epi32(1));
    const __m256i biased =
        _mm256_add_epi32(v, _mm256_add_epi32(_mm256_set1_epi32(0x7FFF), lsb));
    const __m256i rounded = _mm256_srli_epi32(biased, 16);
    const __m256i nan_val = _mm256_or_si256(_mm256_srli_epi32(v, 16),
                                            _mm256_set1_epi32(0x40));
    const __m256i sel = _mm256_blendv_epi8(rounded, nan_val, is_nan);
    const __m256i packed = _mm256_permute4x64_epi64(
        _mm256_packus_epi32(sel, sel), 0b00001000);
    _mm_storeu_si128(reinterpret_cast<__m128i*>(out + i),
                     _mm256_castsi256_si128(packed));
  }
  for (; i < n; ++i) out[i] = f64_to_bf16(in[i]);
}

void x_narrow_f32(const double* in, uint32_t* out, size_t n) {
  size_t i = 0;
  float* fout = reinterpret_cast<float*>(out);
  for (; i + 4 <= n; i += 4) {
    _mm_storeu_ps(fout + i, _mm256_cvtpd_ps(_mm256_loadu_pd(in + i)));
  }
  for (; i < n; ++i) out[i] = f64_to_f32(in[i]);
}

// ============================================================================
// Elementwise f64 arithmetic
// ============================================================================

void x_sub_f64(const double* a, const double* b, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void x_add_f64(const double* a, const double* b, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

double x_max_abs_diff(const double* a, const double* b, size_t n) {
  const __m256d sign_mask = _mm256_set1_pd(-0.0);
  __m256d acc = _mm256_setzero_pd();
  __m256d unord = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d d =
        _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    unord = _mm256_or_pd(unord, _mm256_cmp_pd(d, d, _CMP_UNORD_Q));
    acc = _mm256_max_pd(acc, _mm256_andnot_pd(sign_mask, d));
  }
  if (_mm256_movemask_pd(unord) != 0)
    return std::numeric_limits<double>::quiet_NaN();
  const __m128d hi = _mm256_extractf128_pd(acc, 1);
  __m128d m2 = _mm_max_pd(_mm256_castpd256_pd128(acc), hi);
  m2 = _mm_max_sd(m2, _mm_unpackhi_pd(m2, m2));
  double best = _mm_cvtsd_f64(m2);
  for (; i < n; ++i) {
    const double d = std::fabs(a[i] - b[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::quiet_NaN();
    if (d > best) best = d;
  }
  return best;
}

constexpr Ops kAvx2Ops = {
    "avx2",        x_widen_f16,  x_widen_bf16, x_widen_f32,
    x_narrow_f16,  x_narrow_bf16, x_narrow_f32,
    x_sub_f64,     x_add_f64,    x_max_abs_diff,
};

}  // namespace

const Ops* avx2_ops() {
  static const Ops* selected = []() -> const Ops* {
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("f16c") &&
        __builtin_cpu_supports("fma")) {
      return &kAvx2Ops;
    }
    return nullptr;
  }();
  return selected;
}

}  // namespace guardvec::kernels

#else  // no AVX2 at compile time

namespace guardvec::kernels {
const Ops* avx2_ops() { return nullptr; }
}  // namespace guardvec::kernels

#endif
