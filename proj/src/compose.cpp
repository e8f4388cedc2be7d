// SPDX-License-Identifier: Apache-2.0
#include "guardvec/compose.hpp"

#include <fcntl.h>
#include <fmt/format.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "guardvec/kernels.hpp"

namespace guardvec {

namespace fs = std::filesystem;
using nlohmann::json;

bool CompositionDomain::is_included(const std::string& key) const {
  return std::binary_search(included.begin(), included.end(), key);
}

CompositionDomain composition_domain(const CheckpointIndex& base,
                                     const CheckpointIndex& guard,
                                     const CheckpointIndex& target,
                                     const ExclusionRules& rules) {
  std::set<std::string> all;
  for (const auto& [k, r] : base.records()) all.insert(k);
  for (const auto& [k, r] : guard.records()) all.insert(k);
  for (const auto& [k, r] : target.records()) all.insert(k);

  CompositionDomain d;
  for (const auto& key : all) {
    if (rules.excluded(key)) {
      d.excluded_by_rule.push_back(key);
      continue;
    }
    if (!base.contains(key) || !guard.contains(key) || !target.contains(key)) {
      d.missing.push_back(key);
      continue;
    }
    const auto& sb = base.records().at(key).shape;
    const auto& sg = guard.records().at(key).shape;
    const auto& st = target.records().at(key).shape;
    if (sb != sg || sb != st) {
      d.shape_mismatched.push_back(key);
      continue;
    }
    d.included.push_back(key);
  }
  return d;  // vectors inherit the set's lexicographic order
}

GuardVector extract_guard_vector(const CheckpointIndex& base,
                                 const CheckpointIndex& guard,
                                 const CompositionDomain& domain) {
  const kernels::Ops& ops = kernels::active_ops();
  GuardVector out;
  out.guard_source = guard.origin();
  out.base_source = base.origin();
  for (const auto& key : domain.included) {
    Tensor b = load_tensor(base, key);
    Tensor g = load_tensor(guard, key);
    Tensor v;
    v.dtype = g.dtype;
    v.shape = g.shape;
    v.values.resize(g.values.size());
    ops.sub_f64(g.values.data(), b.values.data(), v.values.data(), v.values.size());
    out.tensors.emplace(key, std::move(v));
  }
  return out;
}

std::map<std::string, TensorSource> compose_checkpoint(const CheckpointIndex& target,
                                                       const GuardVector& guard,
                                                       const CompositionDomain& domain) {
  // The vector must cover the domain exactly, no more and no less.
  if (guard.tensors.size() != domain.included.size())
    throw ValidationError(fmt::format("guard vector has {} keys but the domain includes {}",
                                      guard.tensors.size(), domain.included.size()));
  for (const auto& key : domain.included) {
    if (guard.tensors.count(key) == 0)
      throw ValidationError(fmt::format("guard vector lacks included key '{}'", key));
  }

  const kernels::Ops& ops = kernels::active_ops();
  std::map<std::string, TensorSource> out;
  for (const auto& [key, rec] : target.records()) {
    TensorSource src;
    src.dtype = rec.dtype;
    src.shape = rec.shape;
    if (domain.is_included(key)) {
      const Tensor& v = guard.tensors.at(key);
      Tensor t = load_tensor(target, key);
      if (v.values.size() != t.values.size())
        throw ValidationError(fmt::format("guard vector entry '{}' has {} elements but the target tensor has {}",
                                          key, v.values.size(), t.values.size()));
      src.values.resize(t.values.size());
      ops.add_f64(t.values.data(), v.values.data(), src.values.data(), src.values.size());
    } else {
      src.raw = load_raw(target, key);
    }
    out.emplace(key, std::move(src));
  }
  return out;
}

namespace {

CompositionReport make_report_base(const CheckpointIndex& target,
                                   const CompositionDomain& domain) {
  CompositionReport report;
  report.domain = domain;
  report.output_tensors = target.records().size();
  bool has_embed = false, has_head = false;
  for (const auto& [key, rec] : target.records()) {
    if (!domain.is_included(key)) report.carried_from_target.push_back(key);
    if (wildcard_match("*embed_tokens*", key)) has_embed = true;
    if (wildcard_match("*lm_head*", key)) has_head = true;
  }
  report.output_head_tied_hint = has_embed && !has_head;
  return report;
}

}  // namespace

CompositionReport composition_report(const CheckpointIndex& base,
                                     const CheckpointIndex& guard,
                                     const CheckpointIndex& target,
                                     const CompositionDomain& domain) {
  const kernels::Ops& ops = kernels::active_ops();
  CompositionReport report = make_report_base(target, domain);
  for (const auto& key : domain.included) {
    Tensor b = load_tensor(base, key);
    Tensor g = load_tensor(guard, key);
    KeyDelta d;
    d.elements = g.values.size();
    d.out_dtype = target.records().at(key).dtype;
    d.max_abs_delta = ops.max_abs_diff(g.values.data(), b.values.data(), g.values.size());
    report.deltas.emplace(key, d);
  }
  return report;
}

nlohmann::json CompositionReport::to_json() const {
  json per_key = json::object();
  for (const auto& [key, d] : deltas) {
    json delta;
    if (std::isfinite(d.max_abs_delta)) delta = d.max_abs_delta;
    per_key[key] = {{"max_abs_delta", delta},
                    {"elements", d.elements},
                    {"dtype", std::string(dtype_name(d.out_dtype))}};
  }
  return json{
      {"included", domain.included},
      {"excluded_by_rule", domain.excluded_by_rule},
      {"missing", domain.missing},
      {"shape_mismatched", domain.shape_mismatched},
      {"counts",
       {{"included", domain.included.size()},
        {"excluded_by_rule", domain.excluded_by_rule.size()},
        {"missing", domain.missing.size()},
        {"shape_mismatched", domain.shape_mismatched.size()}}},
      {"per_key_delta", per_key},
      {"carried_from_target", carried_from_target},
      {"output_head_tied_hint", output_head_tied_hint},
      {"output_tensors", output_tensors},
  };
}

namespace {

// Tracks decoded bytes in flight. A task larger than the whole budget is
// admitted only when it runs alone, so the bound is budget plus one tensor.
class ByteBudget {
 public:
  explicit ByteBudget(uint64_t limit) : limit_(limit) {}

  void acquire(uint64_t bytes) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return used_ == 0 || used_ + bytes <= limit_; });
    used_ += bytes;
  }

  void release(uint64_t bytes) {
    {
      std::lock_guard lock(mu_);
      used_ -= bytes;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  uint64_t limit_;
  uint64_t used_ = 0;
};

class OutputFile {
 public:
  OutputFile(const fs::path& final_path, uint64_t total_size)
      : final_path_(final_path), tmp_path_(final_path.string() + ".tmp") {
    fd_ = ::open(tmp_path_.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd_ < 0)
      throw RuntimeFailure(fmt::format("cannot create '{}': {}", tmp_path_.string(), std::strerror(errno)));
    if (::ftruncate(fd_, static_cast<off_t>(total_size)) != 0) {
      const int err = errno;
      ::close(fd_);
      ::unlink(tmp_path_.c_str());
      throw RuntimeFailure(fmt::format("cannot size '{}': {}", tmp_path_.string(), std::strerror(err)));
    }
  }

  ~OutputFile() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(tmp_path_.c_str());
    }
  }

  void write_at(uint64_t offset, const void* data, size_t size) const {
    size_t done = 0;
    while (done < size) {
      const ssize_t n = ::pwrite(fd_, static_cast<const char*>(data) + done,
                                 size - done, static_cast<off_t>(offset + done));
      if (n < 0)
        throw RuntimeFailure(fmt::format("write failed for '{}': {}", tmp_path_.string(), std::strerror(errno)));
      done += static_cast<size_t>(n);
    }
  }

  void commit() {
    ::close(fd_);
    fd_ = -1;
    std::error_code ec;
    fs::rename(tmp_path_, final_path_, ec);
    if (ec) {
      fs::remove(tmp_path_, ec);
      throw RuntimeFailure(fmt::format("cannot move output into place at '{}'", final_path_.string()));
    }
  }

 private:
  fs::path final_path_;
  fs::path tmp_path_;
  int fd_ = -1;
};

}  // namespace

CompositionReport fused_compose(const CheckpointIndex& base,
                                const CheckpointIndex& guard,
                                const CheckpointIndex& target,
                                const ExclusionRules& rules,
                                const fs::path& out_path,
                                const ComposeOptions& opts) {
  const CompositionDomain domain = composition_domain(base, guard, target, rules);
  CompositionReport report = make_report_base(target, domain);

  // Output layout mirrors the target checkpoint: same keys, same dtypes, in
  // lexicographic order.
  std::vector<std::tuple<std::string, DType, const std::vector<int64_t>*>> layout;
  layout.reserve(target.records().size());
  for (const auto& [key, rec] : target.records())
    layout.emplace_back(key, rec.dtype, &rec.shape);
  std::vector<std::pair<uint64_t, uint64_t>> offsets;
  const std::string header = detail::build_container_header(layout, offsets);
  const uint64_t data_begin = 8 + header.size();
  const uint64_t total_size = offsets.empty() ? data_begin : data_begin + offsets.back().second;

  OutputFile out(out_path, total_size);
  {
    char prefix[8];
    const uint64_t header_len = header.size();
    for (int i = 0; i < 8; ++i) prefix[i] = static_cast<char>((header_len >> (8 * i)) & 0xFF);
    out.write_at(0, prefix, 8);
    out.write_at(8, header.data(), header.size());
  }

  struct Task {
    const std::string* key;
    uint64_t out_offset;
    bool included;
  };
  std::vector<Task> tasks;
  tasks.reserve(layout.size());
  for (size_t i = 0; i < layout.size(); ++i) {
    const std::string& key = std::get<0>(layout[i]);
    tasks.push_back(Task{&key, data_begin + offsets[i].first, domain.is_included(key)});
  }

  const kernels::Ops& ops = kernels::active_ops();
  ByteBudget budget(std::max<uint64_t>(opts.budget_bytes, 1));
  std::mutex report_mu;
  std::atomic<size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mu;

  const auto run_task = [&](const Task& task) {
    const std::string& key = *task.key;
    if (!task.included) {
      // Verbatim byte copy from the target shard, streamed in chunks.
      const TensorRecord& rec = target.at(key);
      const auto& shard = target.shards().at(rec.shard);
      std::ifstream in(shard.path, std::ios::binary);
      if (!in) throw RuntimeFailure(fmt::format("cannot open shard '{}'", shard.path.string()));
      in.seekg(static_cast<std::streamoff>(shard.data_begin + rec.begin));
      constexpr size_t kChunk = 4 << 20;
      std::vector<char> buf(std::min<uint64_t>(kChunk, std::max<uint64_t>(rec.num_bytes(), 1)));
      uint64_t remaining = rec.num_bytes();
      uint64_t at = task.out_offset;
      while (remaining > 0) {
        const size_t step = static_cast<size_t>(std::min<uint64_t>(remaining, buf.size()));
        if (!in.read(buf.data(), static_cast<std::streamsize>(step)))
          throw RuntimeFailure(fmt::format("short read of tensor '{}' from '{}'", key, shard.path.string()));
        out.write_at(at, buf.data(), step);
        at += step;
        remaining -= step;
      }
      return;
    }

    const TensorRecord& rec = target.at(key);
    const uint64_t elems = rec.num_elements();
    const uint64_t charge = elems * sizeof(double) * 3;
    budget.acquire(charge);
    try {
      Tensor b = load_tensor(base, key);
      Tensor g = load_tensor(guard, key);
      KeyDelta delta;
      delta.elements = elems;
      delta.out_dtype = rec.dtype;
      delta.max_abs_delta = ops.max_abs_diff(g.values.data(), b.values.data(), elems);
      // g becomes the guard difference, then the composed result, in place.
      ops.sub_f64(g.values.data(), b.values.data(), g.values.data(), elems);
      b = Tensor{};
      Tensor t = load_tensor(target, key);
      ops.add_f64(t.values.data(), g.values.data(), g.values.data(), elems);
      t = Tensor{};
      if (opts.policy == NonFinitePolicy::Reject) {
        for (uint64_t i = 0; i < elems; ++i) {
          if (!std::isfinite(g.values[i]))
            throw ValidationError(fmt::format("composed tensor '{}' has a non-finite value at flat index {}", key, i));
        }
      }
      std::vector<std::byte> packed(elems * dtype_width(rec.dtype));
      kernels::narrow(rec.dtype, g.values.data(), packed.data(), elems);
      out.write_at(task.out_offset, packed.data(), packed.size());
      {
        std::lock_guard lock(report_mu);
        report.deltas.emplace(key, delta);
      }
    } catch (...) {
      budget.release(charge);
      throw;
    }
    budget.release(charge);
  };

  const auto worker = [&] {
    while (!failed.load(std::memory_order_relaxed)) {
      const size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        run_task(tasks[i]);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
      }
    }
  };

  unsigned n_threads = opts.threads > 0
                           ? static_cast<unsigned>(opts.threads)
                           : std::min(std::thread::hardware_concurrency(), 8u);
  n_threads = std::max(1u, std::min<unsigned>(n_threads, std::max<size_t>(tasks.size(), 1)));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (unsigned i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  out.commit();
  return report;
}

}  // namespace guardvec
