// SPDX-License-Identifier: Apache-2.0
#include "guardvec/checkpoint.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "guardvec/kernels.hpp"

namespace guardvec {

using nlohmann::json;
namespace fs = std::filesystem;

uint64_t TensorRecord::num_elements() const {
  uint64_t n = 1;
  for (const int64_t d : shape) {
    if (d < 0) throw ValidationError("negative dimension in tensor shape");
    if (__builtin_mul_overflow(n, static_cast<uint64_t>(d), &n))
      throw ValidationError("tensor shape overflows element count");
  }
  return n;
}

namespace {

constexpr uint64_t kMaxHeaderLen = 256ull << 20;

uint64_t file_size_of(const fs::path& path) {
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw ValidationError(fmt::format("cannot stat '{}': {}", path.string(), ec.message()));
  return size;
}

std::string read_bytes(std::ifstream& in, uint64_t count, const fs::path& path) {
  std::string buf(count, '\0');
  if (!in.read(buf.data(), static_cast<std::streamsize>(count)))
    throw ValidationError(fmt::format("unexpected end of file in '{}'", path.string()));
  return buf;
}

// Parses one container file's header into `records`, tagging them with
// `shard_id`. Validates dtype tags, byte-range arithmetic, and that the
// declared ranges fit in and do not overlap within the data region.
CheckpointIndex::Shard parse_container(const fs::path& path, uint32_t shard_id,
                                       std::map<std::string, TensorRecord>& records) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(fmt::format("cannot open checkpoint '{}'", path.string()));
  const uint64_t total = file_size_of(path);
  if (total < 8)
    throw ValidationError(fmt::format("malformed header in '{}': file shorter than the length prefix", path.string()));

  uint8_t len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];
  if (header_len == 0 || header_len > kMaxHeaderLen || header_len > total - 8)
    throw ValidationError(fmt::format("malformed header in '{}': bad metadata length {}", path.string(), header_len));

  const std::string header = read_bytes(in, header_len, path);
  const json meta = json::parse(header, nullptr, false);
  if (meta.is_discarded() || !meta.is_object())
    throw ValidationError(fmt::format("malformed header in '{}': metadata is not a JSON object", path.string()));

  const uint64_t data_begin = 8 + header_len;
  const uint64_t data_size = total - data_begin;

  std::vector<std::pair<uint64_t, uint64_t>> ranges;
  for (const auto& [key, entry] : meta.items()) {
    if (key == "__metadata__") continue;
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets"))
      throw ValidationError(fmt::format("malformed header in '{}': tensor '{}' lacks dtype/shape/data_offsets", path.string(), key));

    TensorRecord rec;
    const auto dtype_str = entry["dtype"].get<std::string>();
    const auto dt = dtype_from_name(dtype_str);
    if (!dt)
      throw ValidationError(fmt::format("unknown dtype '{}' for tensor '{}' in '{}'", dtype_str, key, path.string()));
    rec.dtype = *dt;

    if (!entry["shape"].is_array())
      throw ValidationError(fmt::format("malformed header in '{}': tensor '{}' shape is not an array", path.string(), key));
    for (const auto& d : entry["shape"]) rec.shape.push_back(d.get<int64_t>());

    const auto& off = entry["data_offsets"];
    if (!off.is_array() || off.size() != 2)
      throw ValidationError(fmt::format("malformed header in '{}': tensor '{}' data_offsets must be [begin, end]", path.string(), key));
    rec.begin = off[0].get<uint64_t>();
    rec.end = off[1].get<uint64_t>();
    rec.shard = shard_id;

    if (rec.end < rec.begin)
      throw ValidationError(fmt::format("tensor '{}' in '{}' has end < begin", key, path.string()));
    const uint64_t expect = rec.num_elements() * dtype_width(rec.dtype);
    if (rec.num_bytes() != expect)
      throw ValidationError(fmt::format(
          "tensor '{}' in '{}': byte range {} does not match shape ({} bytes expected)",
          key, path.string(), rec.num_bytes(), expect));
    if (rec.end > data_size)
      throw ValidationError(fmt::format("truncated data region in '{}': tensor '{}' ends at {} but only {} payload bytes exist",
                                        path.string(), key, rec.end, data_size));

    ranges.emplace_back(rec.begin, rec.end);
    if (!records.emplace(key, std::move(rec)).second)
      throw ValidationError(fmt::format("duplicate tensor '{}' in '{}'", key, path.string()));
  }

  std::sort(ranges.begin(), ranges.end());
  for (size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second)
      throw ValidationError(fmt::format("overlapping tensor byte ranges in '{}'", path.string()));
  }

  return CheckpointIndex::Shard{path, data_begin, data_size, header};
}

}  // namespace

CheckpointIndex CheckpointIndex::open(const fs::path& path) {
  CheckpointIndex index;
  index.origin_ = path.string();
  if (path.extension() == ".json") {
    std::ifstream in(path);
    if (!in) throw ValidationError(fmt::format("cannot open manifest '{}'", path.string()));
    const json manifest = json::parse(in, nullptr, false);
    if (manifest.is_discarded() || !manifest.is_object())
      throw ValidationError(fmt::format("malformed manifest '{}'", path.string()));
    const json& weight_map = manifest.contains("weight_map") ? manifest["weight_map"] : manifest;
    if (!weight_map.is_object())
      throw ValidationError(fmt::format("manifest '{}' has no weight_map object", path.string()));

    // Shards are parsed once each; the map only selects which tensors a
    // caller may use, so every mapped tensor must exist in its shard.
    std::map<std::string, uint32_t> shard_ids;
    std::map<std::string, TensorRecord> all_records;
    for (const auto& [tensor, file] : weight_map.items()) {
      if (!file.is_string())
        throw ValidationError(fmt::format("manifest '{}': entry '{}' is not a filename", path.string(), tensor));
      const std::string fname = file.get<std::string>();
      if (shard_ids.count(fname) == 0) {
        const auto id = static_cast<uint32_t>(index.shards_.size());
        index.shards_.push_back(parse_container(path.parent_path() / fname, id, all_records));
        shard_ids.emplace(fname, id);
      }
      const auto it = all_records.find(tensor);
      if (it == all_records.end() || index.shards_[it->second.shard].path.filename() != fname)
        throw ValidationError(fmt::format("manifest '{}' maps '{}' to '{}' but the shard does not contain it",
                                          path.string(), tensor, fname));
      index.records_.emplace(tensor, it->second);
    }
  } else {
    index.shards_.push_back(parse_container(path, 0, index.records_));
  }
  return index;
}

const TensorRecord& CheckpointIndex::at(const std::string& key) const {
  const auto it = records_.find(key);
  if (it == records_.end())
    throw ValidationError(fmt::format("tensor '{}' not present in checkpoint", key));
  return it->second;
}

std::vector<std::byte> load_raw(const CheckpointIndex& index, const std::string& key) {
  const TensorRecord& rec = index.at(key);
  const CheckpointIndex::Shard& shard = index.shards().at(rec.shard);
  std::ifstream in(shard.path, std::ios::binary);
  if (!in) throw RuntimeFailure(fmt::format("cannot open shard '{}'", shard.path.string()));
  in.seekg(static_cast<std::streamoff>(shard.data_begin + rec.begin));
  std::vector<std::byte> buf(rec.num_bytes());
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw RuntimeFailure(fmt::format("short read of tensor '{}' from '{}'", key, shard.path.string()));
  return buf;
}

Tensor load_tensor(const CheckpointIndex& index, const std::string& key) {
  const TensorRecord& rec = index.at(key);
  const std::vector<std::byte> raw = load_raw(index, key);
  Tensor t;
  t.dtype = rec.dtype;
  t.shape = rec.shape;
  t.values.resize(rec.num_elements());
  kernels::widen(rec.dtype, raw.data(), t.values.data(), t.values.size());
  return t;
}

namespace detail {

std::string build_container_header(
    const std::vector<std::tuple<std::string, DType, const std::vector<int64_t>*>>& layout,
    std::vector<std::pair<uint64_t, uint64_t>>& offsets) {
  json meta;
  meta["__metadata__"] = {{"format", "pt"}};
  offsets.clear();
  uint64_t offset = 0;
  for (const auto& [key, dtype, shape] : layout) {
    if (key == "__metadata__") throw ValidationError("'__metadata__' is reserved and cannot name a tensor");
    const uint64_t bytes = TensorRecord{.shape = *shape}.num_elements() * dtype_width(dtype);
    meta[key] = {{"dtype", std::string(dtype_name(dtype))},
                 {"shape", *shape},
                 {"data_offsets", {offset, offset + bytes}}};
    offsets.emplace_back(offset, offset + bytes);
    offset += bytes;
  }
  std::string header = meta.dump();
  header.resize((header.size() + 7) & ~size_t{7}, ' ');
  return header;
}

}  // namespace detail

void write_checkpoint(const std::map<std::string, TensorSource>& entries,
                      const fs::path& path, NonFinitePolicy policy) {
  // Offsets are assigned in lexicographic key order (the map's order), which
  // together with sorted JSON keys makes the output a pure function of the
  // input map.
  std::vector<std::tuple<std::string, DType, const std::vector<int64_t>*>> layout;
  layout.reserve(entries.size());
  for (const auto& [key, src] : entries) {
    const uint64_t elems = TensorRecord{.shape = src.shape}.num_elements();
    const uint64_t bytes = elems * dtype_width(src.dtype);
    if (!src.raw.empty()) {
      if (src.raw.size() != bytes)
        throw ValidationError(fmt::format("tensor '{}': raw payload is {} bytes but shape requires {}",
                                          key, src.raw.size(), bytes));
    } else if (src.values.size() != elems) {
      throw ValidationError(fmt::format("tensor '{}': {} values supplied but shape requires {}",
                                        key, src.values.size(), elems));
    }
    layout.emplace_back(key, src.dtype, &src.shape);
  }

  std::vector<std::pair<uint64_t, uint64_t>> offsets;
  const std::string header = detail::build_container_header(layout, offsets);

  const fs::path tmp = path.string() + ".tmp";
  bool committed = false;
  std::vector<std::byte> narrow_buf;
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw RuntimeFailure(fmt::format("cannot create '{}'", tmp.string()));
      const uint64_t header_len = header.size();
      char len_bytes[8];
      for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<char>((header_len >> (8 * i)) & 0xFF);
      out.write(len_bytes, 8);
      out.write(header.data(), static_cast<std::streamsize>(header.size()));

      for (const auto& [key, src] : entries) {
        const uint64_t bytes = TensorRecord{.shape = src.shape}.num_elements() * dtype_width(src.dtype);
        if (!src.raw.empty()) {
          out.write(reinterpret_cast<const char*>(src.raw.data()),
                    static_cast<std::streamsize>(src.raw.size()));
        } else {
          if (policy == NonFinitePolicy::Reject) {
            for (size_t i = 0; i < src.values.size(); ++i) {
              if (!std::isfinite(src.values[i]))
                throw ValidationError(fmt::format("tensor '{}' has a non-finite value at flat index {}", key, i));
            }
          }
          narrow_buf.resize(bytes);
          kernels::narrow(src.dtype, src.values.data(), narrow_buf.data(), src.values.size());
          out.write(reinterpret_cast<const char*>(narrow_buf.data()),
                    static_cast<std::streamsize>(narrow_buf.size()));
        }
        if (!out) throw RuntimeFailure(fmt::format("write failed for '{}'", tmp.string()));
      }
    }
    fs::rename(tmp, path);
    committed = true;
  } catch (...) {
    if (!committed) {
      std::error_code ec;
      fs::remove(tmp, ec);
    }
    throw;
  }
}

bool wildcard_match(std::string_view pattern, std::string_view text) {
  size_t pi = 0, ti = 0;
  size_t star = std::string_view::npos, mark = 0;
  while (ti < text.size()) {
    if (pi < pattern.size() && pattern[pi] == '*') {
      star = pi++;
      mark = ti;
    } else if (pi < pattern.size() && pattern[pi] == text[ti]) {
      ++pi;
      ++ti;
    } else if (star != std::string_view::npos) {
      pi = star + 1;
      ti = ++mark;
    } else {
      return false;
    }
  }
  while (pi < pattern.size() && pattern[pi] == '*') ++pi;
  return pi == pattern.size();
}

ExclusionRules ExclusionRules::defaults() {
  return ExclusionRules{{
      "*embed_tokens*",  // token embedding tables
      "*lm_head*",       // output projection head
      "*norm.weight",    // final norm and per-layer norms (input_layernorm,
                         // post_attention_layernorm, *_feedforward_layernorm,
                         // q_norm/k_norm all end with this suffix)
      "*norm.bias",
  }};
}

ExclusionRules ExclusionRules::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot open rules file '{}'", path.string()));
  const json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_object() || !doc.contains("exclude") || !doc["exclude"].is_array())
    throw ValidationError(fmt::format("rules file '{}' must be {{\"exclude\": [patterns]}}", path.string()));
  ExclusionRules rules;
  for (const auto& p : doc["exclude"]) {
    if (!p.is_string())
      throw ValidationError(fmt::format("rules file '{}': patterns must be strings", path.string()));
    rules.patterns.push_back(p.get<std::string>());
  }
  return rules;
}

bool ExclusionRules::excluded(std::string_view key) const {
  for (const auto& p : patterns) {
    if (wildcard_match(p, key)) return true;
  }
  return false;
}

}  // namespace guardvec
