// SPDX-License-Identifier: Apache-2.0
#include "guardvec/classifier.hpp"

#include <fmt/core.h>
#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "guardvec/errors.hpp"
#include "guardvec/text.hpp"

namespace guardvec {

const char* classifier_mode_name(ClassifierMode m) {
  return m == ClassifierMode::SingleToken ? "single_token" : "generation";
}

// ---------------------------------------------------------------- mock ----

MockClassifier MockClassifier::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("mock classifier: top level must be an object");
  MockClassifier m;
  if (doc.contains("mode")) {
    const auto& mv = doc.at("mode");
    if (!mv.is_string()) throw ValidationError("mock classifier: 'mode' must be a string");
    const std::string s = mv.get<std::string>();
    if (s == "single_token") {
      m.mode_ = ClassifierMode::SingleToken;
    } else if (s == "generation") {
      m.mode_ = ClassifierMode::GenerationParse;
    } else {
      throw ValidationError(fmt::format("mock classifier: unknown mode '{}'", s));
    }
  }
  const auto read_p = [](const nlohmann::json& v, const char* where) {
    if (!v.is_number()) throw ValidationError(fmt::format("mock classifier: {} must be a number", where));
    const double p = v.get<double>();
    if (!(p >= 0.0 && p <= 1.0))
      throw ValidationError(fmt::format("mock classifier: {} must be in [0,1], got {}", where, p));
    return p;
  };
  if (doc.contains("default_p")) m.default_p_ = read_p(doc.at("default_p"), "default_p");
  if (doc.contains("service_time_ms")) {
    const auto& v = doc.at("service_time_ms");
    if (!v.is_number() || v.get<double>() < 0.0)
      throw ValidationError("mock classifier: service_time_ms must be a non-negative number");
    m.service_time_ms_ = v.get<double>();
  }
  if (doc.contains("rules")) {
    if (!doc.at("rules").is_array()) throw ValidationError("mock classifier: 'rules' must be an array");
    size_t i = 0;
    for (const auto& rv : doc.at("rules")) {
      if (!rv.is_object())
        throw ValidationError(fmt::format("mock classifier: rule {} must be an object", i));
      Rule r;
      if (rv.contains("contains")) {
        if (!rv.at("contains").is_string())
          throw ValidationError(fmt::format("mock classifier: rule {}: 'contains' must be a string", i));
        r.contains = rv.at("contains").get<std::string>();
      }
      for (const char* key : {"min_len", "max_len"}) {
        if (!rv.contains(key)) continue;
        const auto& lv = rv.at(key);
        // in-memory tables built from int literals carry signed numbers
        const bool ok = lv.is_number_unsigned() ||
                        (lv.is_number_integer() && lv.get<int64_t>() >= 0);
        if (!ok)
          throw ValidationError(
              fmt::format("mock classifier: rule {}: '{}' must be a non-negative integer", i, key));
        const uint64_t n = lv.get<uint64_t>();
        (std::string_view(key) == "min_len" ? r.min_len : r.max_len) = n;
      }
      r.p = read_p(rv.contains("p") ? rv.at("p") : nlohmann::json(0.0),
                   fmt::format("rule {}: 'p'", i).c_str());
      if (!rv.contains("p") && !rv.contains("generate"))
        throw ValidationError(fmt::format("mock classifier: rule {} needs 'p' or 'generate'", i));
      if (rv.contains("generate")) {
        if (!rv.at("generate").is_string())
          throw ValidationError(fmt::format("mock classifier: rule {}: 'generate' must be a string", i));
        r.generate = rv.at("generate").get<std::string>();
      }
      m.rules_.push_back(std::move(r));
      ++i;
    }
  }
  return m;
}

MockClassifier MockClassifier::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(fmt::format("cannot open mock classifier file: {}", path.string()));
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("{}: invalid JSON: {}", path.string(), e.what()));
  }
  return from_json(doc);
}

const MockClassifier::Rule* MockClassifier::match(const std::string& text) const {
  std::optional<uint64_t> len;  // character count, computed only when a rule needs it
  for (const auto& r : rules_) {
    if (r.contains && text.find(*r.contains) == std::string::npos) continue;
    if (r.min_len || r.max_len) {
      if (!len) len = text::grapheme_count(text);
      if (r.min_len && *len < *r.min_len) continue;
      if (r.max_len && *len > *r.max_len) continue;
    }
    return &r;
  }
  return nullptr;
}

double MockClassifier::rule_p(const std::string& text) const {
  const Rule* r = match(text);
  return r ? r->p : default_p_;
}

LabelLogits MockClassifier::label_logits(const std::string& text) const {
  const double p = std::clamp(rule_p(text), 1e-12, 1.0 - 1e-12);
  return LabelLogits{std::log(1.0 - p), std::log(p)};
}

std::string MockClassifier::generate(const std::string& text) const {
  const Rule* r = match(text);
  if (r && r->generate) return *r->generate;
  return (r ? r->p : default_p_) >= 0.5 ? "unsafe" : "safe";
}

void MockClassifier::pause() const {
  if (service_time_ms_ > 0.0)
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(service_time_ms_));
}

Verdict MockClassifier::classify(const std::string& text, double tau) {
  pause();
  if (mode_ == ClassifierMode::SingleToken) {
    Verdict v;
    v.source = VerdictSource::SingleToken;
    v.p_unsafe = p_unsafe(label_logits(text));
    v.decision = decide(*v.p_unsafe, tau);
    return v;
  }
  return parse_generation(generate(text));
}

// ---------------------------------------------------------------- http ----

struct HttpClassifierClient::Impl {
  explicit Impl(const std::string& base_url) : cli(base_url) {}
  httplib::Client cli;
};

HttpClassifierClient::HttpClassifierClient(const std::string& base_url, ClassifierMode mode,
                                           ClientOptions opts)
    : mode_(mode), opts_(std::move(opts)), impl_(std::make_unique<Impl>(base_url)) {
  if (!impl_->cli.is_valid())
    throw ValidationError(fmt::format("invalid endpoint address: {}", base_url));
  const auto connect_ms = std::chrono::milliseconds(
      static_cast<long>(std::max(1.0, opts_.timeout_seconds * 1000.0)));
  impl_->cli.set_connection_timeout(connect_ms);
  impl_->cli.set_read_timeout(connect_ms);
  impl_->cli.set_write_timeout(connect_ms);
  if (const char* token = std::getenv("GUARDVEC_API_TOKEN"); token && *token)
    impl_->cli.set_default_headers({{"Authorization", fmt::format("Bearer {}", token)}});
}

HttpClassifierClient::~HttpClassifierClient() = default;
HttpClassifierClient::HttpClassifierClient(HttpClassifierClient&&) noexcept = default;
HttpClassifierClient& HttpClassifierClient::operator=(HttpClassifierClient&&) noexcept = default;

namespace {

nlohmann::json post_json(httplib::Client& cli, const char* path, const nlohmann::json& body) {
  const auto res = cli.Post(path, body.dump(), "application/json");
  if (!res)
    throw RuntimeFailure(fmt::format("{}: transport error: {}", path, httplib::to_string(res.error())));
  if (res->status != 200)
    throw RuntimeFailure(fmt::format("{}: endpoint returned status {}", path, res->status));
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeFailure(fmt::format("{}: response is not valid JSON: {}", path, e.what()));
  }
}

}  // namespace

LabelLogits HttpClassifierClient::label_logits(const std::string& text) {
  nlohmann::json body{{"text", text}};
  if (opts_.system_prompt) body["system_prompt"] = *opts_.system_prompt;
  const auto doc = post_json(impl_->cli, "/v1/label_logits", body);
  if (!doc.is_object() || !doc.contains("z_safe") || !doc.contains("z_unsafe") ||
      !doc["z_safe"].is_number() || !doc["z_unsafe"].is_number())
    throw RuntimeFailure("/v1/label_logits: response missing numeric z_safe/z_unsafe");
  return LabelLogits{doc["z_safe"].get<double>(), doc["z_unsafe"].get<double>()};
}

std::string HttpClassifierClient::generate(const std::string& text) {
  nlohmann::json body{{"text", text}, {"temperature", 0}, {"max_tokens", opts_.max_tokens}};
  if (opts_.system_prompt) body["system_prompt"] = *opts_.system_prompt;
  const auto doc = post_json(impl_->cli, "/v1/generate", body);
  if (!doc.is_object() || !doc.contains("text") || !doc["text"].is_string())
    throw RuntimeFailure("/v1/generate: response missing text field");
  return doc["text"].get<std::string>();
}

Verdict HttpClassifierClient::classify(const std::string& text, double tau) {
  if (mode_ == ClassifierMode::SingleToken) {
    Verdict v;
    v.source = VerdictSource::SingleToken;
    v.p_unsafe = p_unsafe(label_logits(text));
    v.decision = decide(*v.p_unsafe, tau);
    return v;
  }
  return parse_generation(generate(text), opts_.schema);
}

// ------------------------------------------------------------- factory ----

ClientFactory make_client_factory(const std::string& address, ClassifierMode mode,
                                  const ClientOptions& opts) {
  constexpr std::string_view kMock = "mock://";
  if (address.rfind(kMock, 0) == 0) {
    const std::filesystem::path path(address.substr(kMock.size()));
    const auto probe = MockClassifier::from_file(path);  // validate eagerly
    (void)probe;
    return [path] { return std::make_unique<MockClassifier>(MockClassifier::from_file(path)); };
  }
  if (address.rfind("http://", 0) == 0 || address.rfind("https://", 0) == 0) {
    const auto probe = HttpClassifierClient(address, mode, opts);  // validates the URL
    return [address, mode, opts] {
      return std::make_unique<HttpClassifierClient>(address, mode, opts);
    };
  }
  throw ValidationError(
      fmt::format("unsupported endpoint address '{}': expected mock:// or http(s)://", address));
}

}  // namespace guardvec
