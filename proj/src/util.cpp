// SPDX-License-Identifier: Apache-2.0
#include "guardvec/util.hpp"

#include <fmt/core.h>
#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <memory>

#include "guardvec/errors.hpp"

namespace guardvec {

namespace {

using MdCtx = std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)>;

std::string finish_hex(EVP_MD_CTX* ctx) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx, digest, &len) != 1) throw RuntimeFailure("digest finalize failed");
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  MdCtx ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw RuntimeFailure("digest init failed");
  if (EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1)
    throw RuntimeFailure("digest update failed");
  return finish_hex(ctx.get());
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure(fmt::format("cannot open for hashing: {}", path.string()));
  MdCtx ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw RuntimeFailure("digest init failed");
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = in.gcount();
    if (got > 0 && EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<size_t>(got)) != 1)
      throw RuntimeFailure("digest update failed");
  }
  if (in.bad()) throw RuntimeFailure(fmt::format("read failed while hashing: {}", path.string()));
  return finish_hex(ctx.get());
}

namespace {

std::string utc_now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  return fmt::format("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z", tm.tm_year + 1900, tm.tm_mon + 1,
                     tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
}

}  // namespace

void log_line(std::string_view level, std::string_view event, const nlohmann::json& fields) {
  nlohmann::json doc{{"ts", utc_now_iso8601()}, {"level", level}, {"event", event}};
  if (fields.is_object())
    for (const auto& [k, v] : fields.items()) doc[k] = v;
  std::fputs((doc.dump() + "\n").c_str(), stderr);
}

nlohmann::json build_manifest(const nlohmann::json& config,
                              const std::vector<std::filesystem::path>& inputs) {
  nlohmann::json digests = nlohmann::json::object();
  for (const auto& path : inputs) digests[path.string()] = sha256_file(path);
  return nlohmann::json{{"version", std::string(kToolkitVersion)},
                        {"created_utc", utc_now_iso8601()},
                        {"config", config},
                        {"config_sha256", sha256_hex(config.dump())},
                        {"inputs", std::move(digests)}};
}

std::filesystem::path manifest_path_for(const std::filesystem::path& output) {
  auto p = output;
  p += ".manifest.json";
  return p;
}

void write_manifest(const nlohmann::json& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure(fmt::format("cannot write manifest: {}", path.string()));
  out << manifest.dump(2) << '\n';
  out.flush();
  if (!out) throw RuntimeFailure(fmt::format("manifest write failed: {}", path.string()));
}

}  // namespace guardvec
