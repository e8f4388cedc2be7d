// SPDX-License-Identifier: Apache-2.0
#include "guardvec/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>

namespace guardvec::kernels {

// ============================================================================
// Scalar reference kernels
// ============================================================================

namespace {

void s_widen_f16(const uint16_t* in, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = f16_to_f64(in[i]);
}

void s_widen_bf16(const uint16_t* in, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = bf16_to_f64(in[i]);
}

void s_widen_f32(const uint32_t* in, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = f32_to_f64(in[i]);
}

void s_narrow_f16(const double* in, uint16_t* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = f64_to_f16(in[i]);
}

void s_narrow_bf16(const double* in, uint16_t* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = f64_to_bf16(in[i]);
}

void s_narrow_f32(const double* in, uint32_t* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = f64_to_f32(in[i]);
}

void s_sub_f64(const double* a, const double* b, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void s_add_f64(const double* a, const double* b, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

double s_max_abs_diff(const double* a, const double* b, size_t n) {
  double best = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = std::fabs(a[i] - b[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::quiet_NaN();
    if (d > best) best = d;
  }
  return best;
}

constexpr Ops kScalarOps = {
    "scalar",       s_widen_f16,  s_widen_bf16, s_widen_f32,
    s_narrow_f16,   s_narrow_bf16, s_narrow_f32,
    s_sub_f64,      s_add_f64,    s_max_abs_diff,
};

}  // namespace

const Ops& scalar_ops() { return kScalarOps; }

const Ops& active_ops() {
  static const Ops& selected = []() -> const Ops& {
    const char* force = std::getenv("GUARDVEC_KERNELS");
    if (force != nullptr && std::strcmp(force, "scalar") == 0) return kScalarOps;
    const Ops* simd = avx2_ops();
    if (force != nullptr && std::strcmp(force, "avx2") == 0 && simd == nullptr)
      return kScalarOps;
    return simd != nullptr ? *simd : kScalarOps;
  }();
  return selected;
}

void widen(DType d, const void* in, double* out, size_t n) {
  const Ops& ops = active_ops();
  switch (d) {
    case DType::F16: ops.widen_f16(static_cast<const uint16_t*>(in), out, n); break;
    case DType::BF16: ops.widen_bf16(static_cast<const uint16_t*>(in), out, n); break;
    case DType::F32: ops.widen_f32(static_cast<const uint32_t*>(in), out, n); break;
  }
}

void narrow(DType d, const double* in, void* out, size_t n) {
  const Ops& ops = active_ops();
  switch (d) {
    case DType::F16: ops.narrow_f16(in, static_cast<uint16_t*>(out), n); break;
    case DType::BF16: ops.narrow_bf16(in, static_cast<uint16_t*>(out), n); break;
    case DType::F32: ops.narrow_f32(in, static_cast<uint32_t*>(out), n); break;
  }
}

}  // namespace guardvec::kernels
