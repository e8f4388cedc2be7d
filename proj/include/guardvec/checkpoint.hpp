// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "guardvec/dtype.hpp"
#include "guardvec/errors.hpp"

namespace guardvec {

/// One tensor's entry in a checkpoint header. `begin`/`end` are byte offsets
/// relative to the owning shard's data region; `end - begin` always equals
/// element count times dtype width (enforced at parse time).
struct TensorRecord {
  DType dtype = DType::F32;
  std::vector<int64_t> shape;
  uint64_t begin = 0;
  uint64_t end = 0;
  uint32_t shard = 0;

  uint64_t num_elements() const;
  uint64_t num_bytes() const { return end - begin; }
};

/// Parsed view of a checkpoint: tensor records plus the shard files backing
/// them. Opening never loads payload bytes. A checkpoint is either a single
/// container file or a JSON weight-map manifest naming one file per tensor.
class CheckpointIndex {
 public:
  struct Shard {
    std::filesystem::path path;
    uint64_t data_begin = 0;  // absolute file offset where payload bytes start
    uint64_t data_size = 0;
    std::string header_json;  // raw metadata block, verbatim
  };

  /// Parses `path` (container file, or manifest when the extension is .json).
  /// Throws ValidationError on malformed headers, unknown dtypes, overlapping
  /// or out-of-range byte ranges, and truncated data regions.
  static CheckpointIndex open(const std::filesystem::path& path);

  const std::map<std::string, TensorRecord>& records() const { return records_; }
  const std::vector<Shard>& shards() const { return shards_; }
  bool contains(const std::string& key) const { return records_.count(key) != 0; }
  const TensorRecord& at(const std::string& key) const;

  /// The path this index was opened from, for provenance reporting.
  const std::string& origin() const { return origin_; }

 private:
  std::map<std::string, TensorRecord> records_;
  std::vector<Shard> shards_;
  std::string origin_;
};

/// A tensor widened to f64. Widening is value-exact for every finite stored
/// element, so no information is lost before arithmetic.
struct Tensor {
  DType dtype = DType::F32;  // storage dtype it was read from
  std::vector<int64_t> shape;
  std::vector<double> values;
};

Tensor load_tensor(const CheckpointIndex& index, const std::string& key);

/// Raw payload bytes of one tensor, no decoding.
std::vector<std::byte> load_raw(const CheckpointIndex& index, const std::string& key);

enum class NonFinitePolicy { Reject, Allow };

/// Writer entry. When `raw` is non-empty it is written verbatim (byte-exact
/// carry-through); otherwise `values` are narrowed to `dtype` with a single
/// round-to-nearest-even per element.
struct TensorSource {
  DType dtype = DType::F32;
  std::vector<int64_t> shape;
  std::vector<double> values;
  std::vector<std::byte> raw;
};

/// Writes a single-file checkpoint. Tensors are laid out in lexicographic key
/// order and the same map always produces byte-identical files. With the
/// default policy any non-finite value aborts the write (ValidationError) and
/// no partial output is left behind.
void write_checkpoint(const std::map<std::string, TensorSource>& entries,
                      const std::filesystem::path& path,
                      NonFinitePolicy policy = NonFinitePolicy::Reject);

namespace detail {

/// Builds the container metadata block for tensors laid out contiguously in
/// the given order, filling `offsets` with each entry's (begin, end). Both
/// writer routes share this so their headers are byte-identical.
std::string build_container_header(
    const std::vector<std::tuple<std::string, DType, const std::vector<int64_t>*>>& layout,
    std::vector<std::pair<uint64_t, uint64_t>>& offsets);

}  // namespace detail

/// Anchored wildcard match: '*' spans any run of characters (including none),
/// every other character matches literally, and the whole key must match.
bool wildcard_match(std::string_view pattern, std::string_view text);

/// Key patterns excluded from composition. The defaults cover the token
/// embedding, output head, and normalization parameters of the common
/// decoder-only checkpoint layouts (Llama- and Gemma-style key names).
struct ExclusionRules {
  std::vector<std::string> patterns;

  static ExclusionRules defaults();
  /// Loads {"exclude": ["pattern", ...]} from a JSON file.
  static ExclusionRules load(const std::filesystem::path& path);

  bool excluded(std::string_view key) const;
};

}  // namespace guardvec
