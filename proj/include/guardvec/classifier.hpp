// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "guardvec/decision.hpp"

namespace guardvec {

// How verdicts are produced: from reserved-label logits or by parsing a
// short generated judgment.
enum class ClassifierMode : uint8_t { SingleToken, GenerationParse };

const char* classifier_mode_name(ClassifierMode m);

struct ClientOptions {
  std::optional<std::string> system_prompt;
  double timeout_seconds = 30.0;
  uint64_t max_tokens = 32;  // generation judgments are short; capped per request
  ParseSchema schema;
};

/// One classifier connection. classify() is one stateless request; transport
/// problems surface as RuntimeFailure. Instances are not thread-safe; run
/// one per worker (see make_client_factory).
class ClassifierClient {
 public:
  virtual ~ClassifierClient() = default;
  virtual ClassifierMode mode() const = 0;
  virtual Verdict classify(const std::string& text, double tau) = 0;
};

/// Deterministic in-process classifier driven by a JSON rule table, so every
/// pipeline behavior is testable without a network. Format:
///
///   {"mode": "single_token" | "generation",
///    "default_p": 0.01,
///    "service_time_ms": 0,
///    "rules": [{"contains": "trigger", "min_len": 1, "max_len": 400,
///               "p": 0.97, "generate": "unsafe\nS9"}, ...]}
///
/// The first rule whose conditions all hold wins; lengths are in characters.
/// `p` becomes logits (z_unsafe=log p, z_safe=log(1-p)) in single-token mode
/// and picks the safe/unsafe judgment in generation mode unless the rule
/// carries a literal `generate` string.
class MockClassifier : public ClassifierClient {
 public:
  static MockClassifier from_json(const nlohmann::json& doc);
  static MockClassifier from_file(const std::filesystem::path& path);

  ClassifierMode mode() const override { return mode_; }
  Verdict classify(const std::string& text, double tau) override;

  double rule_p(const std::string& text) const;
  LabelLogits label_logits(const std::string& text) const;
  std::string generate(const std::string& text) const;
  double service_time_ms() const { return service_time_ms_; }

 private:
  struct Rule {
    std::optional<std::string> contains;
    std::optional<uint64_t> min_len;
    std::optional<uint64_t> max_len;
    double p = 0.0;
    std::optional<std::string> generate;
  };

  const Rule* match(const std::string& text) const;
  void pause() const;

  ClassifierMode mode_ = ClassifierMode::SingleToken;
  double default_p_ = 0.0;
  double service_time_ms_ = 0.0;
  std::vector<Rule> rules_;
};

/// HTTP client for the classifier wire protocol:
///   POST /v1/label_logits {system_prompt?, text} -> {z_safe, z_unsafe}
///   POST /v1/generate {system_prompt?, text, temperature: 0, max_tokens}
///     -> {text}
/// Requests always send temperature 0; the server owns determinism. A bearer
/// token is attached from $GUARDVEC_API_TOKEN when set.
class HttpClassifierClient : public ClassifierClient {
 public:
  HttpClassifierClient(const std::string& base_url, ClassifierMode mode,
                       ClientOptions opts = {});
  ~HttpClassifierClient() override;
  HttpClassifierClient(HttpClassifierClient&&) noexcept;
  HttpClassifierClient& operator=(HttpClassifierClient&&) noexcept;

  ClassifierMode mode() const override { return mode_; }
  Verdict classify(const std::string& text, double tau) override;

  LabelLogits label_logits(const std::string& text);
  std::string generate(const std::string& text);

 private:
  struct Impl;
  ClassifierMode mode_;
  ClientOptions opts_;
  std::unique_ptr<Impl> impl_;
};

using ClientFactory = std::function<std::unique_ptr<ClassifierClient>()>;

/// Resolve an endpoint address to a client factory. "mock://path.json" loads
/// the rule table once and stamps out cheap copies; "http://" and "https://"
/// yield one connection per call. The address is validated eagerly.
/// For HTTP endpoints `mode` picks the pipeline; a mock file declares its own.
ClientFactory make_client_factory(const std::string& address, ClassifierMode mode,
                                  const ClientOptions& opts = {});

}  // namespace guardvec
