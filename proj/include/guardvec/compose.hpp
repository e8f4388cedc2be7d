// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "guardvec/checkpoint.hpp"

namespace guardvec {

/// Disjoint partition of every key appearing in any of the three input
/// checkpoints. Precedence when several classifications apply:
/// excluded_by_rule > missing > shape_mismatched. Only `included` keys take
/// part in the parameter arithmetic; everything else is carried through from
/// the composition target verbatim (when present there at all).
struct CompositionDomain {
  std::vector<std::string> included;          // in all three, shapes equal, not excluded
  std::vector<std::string> excluded_by_rule;  // matches an exclusion pattern
  std::vector<std::string> missing;           // absent from at least one checkpoint
  std::vector<std::string> shape_mismatched;  // present everywhere, shapes differ

  bool is_included(const std::string& key) const;
};

CompositionDomain composition_domain(const CheckpointIndex& base,
                                     const CheckpointIndex& guard,
                                     const CheckpointIndex& target,
                                     const ExclusionRules& rules);

/// Per-key difference guard[t] - base[t] over the included domain, in f64.
/// `guard_source` and `base_source` identify where the operands came from.
struct GuardVector {
  std::map<std::string, Tensor> tensors;
  std::string guard_source;
  std::string base_source;
};

GuardVector extract_guard_vector(const CheckpointIndex& base,
                                 const CheckpointIndex& guard,
                                 const CompositionDomain& domain);

struct KeyDelta {
  double max_abs_delta = 0.0;
  uint64_t elements = 0;
  DType out_dtype = DType::F32;
};

struct CompositionReport {
  CompositionDomain domain;
  std::map<std::string, KeyDelta> deltas;        // included keys only
  std::vector<std::string> carried_from_target;  // output keys copied verbatim
  bool output_head_tied_hint = false;  // embeddings present but no output head key
  uint64_t output_tensors = 0;

  nlohmann::json to_json() const;
};

struct ComposeOptions {
  NonFinitePolicy policy = NonFinitePolicy::Reject;
  uint64_t budget_bytes = 2ull << 30;  // decoded f64 bytes in flight
  int threads = 0;                     // 0 = pick from hardware
};

/// Unfused route: materializes target + guard as writer entries. Off-domain
/// tensors carry the target's payload bytes unchanged. Pair with
/// write_checkpoint; the result is byte-identical to fused_compose.
std::map<std::string, TensorSource> compose_checkpoint(const CheckpointIndex& target,
                                                       const GuardVector& guard,
                                                       const CompositionDomain& domain);

CompositionReport composition_report(const CheckpointIndex& base,
                                     const CheckpointIndex& guard,
                                     const CheckpointIndex& target,
                                     const CompositionDomain& domain);

/// Fused route: streams one tensor at a time (optionally across a small
/// worker pool) directly into `out_path`, keeping peak decoded bytes within
/// `budget_bytes` plus one tensor. Output keys equal the target's key set and
/// are laid out in lexicographic order. On any failure the partial output is
/// removed.
CompositionReport fused_compose(const CheckpointIndex& base,
                                const CheckpointIndex& guard,
                                const CheckpointIndex& target,
                                const ExclusionRules& rules,
                                const std::filesystem::path& out_path,
                                const ComposeOptions& opts = {});

}  // namespace guardvec
