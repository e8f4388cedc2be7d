// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>

#include "guardvec/dtype.hpp"

namespace guardvec::kernels {

// Batch kernels behind the composition arithmetic. One scalar reference
// implementation plus ISA-specific variants chosen at runtime; every variant
// must be bit-identical to the reference (enforced by the equivalence tests).
struct Ops {
  const char* name;

  // Storage dtype -> f64. Widening is value-exact for finite inputs.
  void (*widen_f16)(const uint16_t* in, double* out, size_t n);
  void (*widen_bf16)(const uint16_t* in, double* out, size_t n);
  void (*widen_f32)(const uint32_t* in, double* out, size_t n);

  // f64 -> storage dtype, single round-to-nearest-even per element.
  void (*narrow_f16)(const double* in, uint16_t* out, size_t n);
  void (*narrow_bf16)(const double* in, uint16_t* out, size_t n);
  void (*narrow_f32)(const double* in, uint32_t* out, size_t n);

  // Elementwise f64 arithmetic: out = a - b, out = a + b.
  void (*sub_f64)(const double* a, const double* b, double* out, size_t n);
  void (*add_f64)(const double* a, const double* b, double* out, size_t n);

  // max_i |a[i] - b[i]|; NaN if any difference is NaN, 0.0 for n == 0.
  double (*max_abs_diff)(const double* a, const double* b, size_t n);
};

// Scalar reference path, always available.
const Ops& scalar_ops();

// AVX2 (+F16C, FMA) path, or nullptr when unsupported by compiler or CPU.
const Ops* avx2_ops();

// Best supported path. GUARDVEC_KERNELS=scalar|avx2 overrides selection
// (unsupported requests fall back to scalar).
const Ops& active_ops();

// Dispatch helpers over the active path.
void widen(DType d, const void* in, double* out, size_t n);
void narrow(DType d, const double* in, void* out, size_t n);

}  // namespace guardvec::kernels
