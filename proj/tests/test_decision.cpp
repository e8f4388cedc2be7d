// SPDX-License-Identifier: Apache-2.0
// Decision arithmetic, the mock rule table, the HTTP wire protocol against
// an in-process server, and the evaluation drivers.
#include "guardvec/decision.hpp"

#include <doctest.h>
#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <random>
#include <thread>

#include "guardvec/classifier.hpp"
#include "guardvec/errors.hpp"
#include "guardvec/evaluate.hpp"
#include "support.hpp"

using namespace guardvec;
using nlohmann::json;
using testsupport::TempDir;
using testsupport::write_file;

TEST_CASE("unsafe probability from two-way logits") {
  CHECK(p_unsafe({3.0, 3.0}) == 0.5);
  CHECK(p_unsafe({-7.25, -7.25}) == 0.5);

  // Dominant unsafe logit saturates toward 1.
  CHECK(p_unsafe({0.0, 50.0}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(p_unsafe({50.0, 0.0}) == doctest::Approx(0.0).epsilon(1e-15));

  // Large logits must not overflow: only the difference matters.
  const double p = p_unsafe({1000.0, 999.0});
  CHECK(std::isfinite(p));
  CHECK(p == doctest::Approx(1.0 / (1.0 + std::exp(1.0))).epsilon(1e-14));
  CHECK(p == doctest::Approx(0.26894).epsilon(1e-4));

  SUBCASE("matches a high-precision sigmoid oracle") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> dist(-40.0, 40.0);
    for (int i = 0; i < 300; ++i) {
      const double zs = dist(rng), zu = dist(rng);
      const long double want =
          1.0L / (1.0L + std::exp(static_cast<long double>(zs) - static_cast<long double>(zu)));
      CHECK(p_unsafe({zs, zu}) == doctest::Approx(static_cast<double>(want)).epsilon(1e-13));
      CHECK(p_unsafe({zs, zu}) + p_unsafe({zu, zs}) == doctest::Approx(1.0).epsilon(1e-14));
    }
  }
  SUBCASE("non-finite logits are refused") {
    CHECK_THROWS_AS(p_unsafe({std::nan(""), 0.0}), ValidationError);
    CHECK_THROWS_AS(p_unsafe({0.0, INFINITY}), ValidationError);
    CHECK_THROWS_AS(p_unsafe({-INFINITY, 0.0}), ValidationError);
  }
}

TEST_CASE("threshold decision boundary is inclusive") {
  CHECK(decide(0.5, 0.5) == Label::Unsafe);
  CHECK(decide(0.49, 0.5) == Label::Safe);
  CHECK(decide(0.0, 0.05) == Label::Safe);
  CHECK(decide(1.0, 0.95) == Label::Unsafe);
  CHECK(decide(0.95, 0.95) == Label::Unsafe);
}

TEST_CASE("generation parsing") {
  SUBCASE("markers on the first line") {
    const auto safe = parse_generation("safe");
    CHECK(safe.decision == Label::Safe);
    CHECK(safe.source == VerdictSource::GenerationParse);
    CHECK(!safe.p_unsafe);
    CHECK(!safe.parse_failure);

    const auto unsafe = parse_generation("unsafe\nS9");
    CHECK(unsafe.decision == Label::Unsafe);
    CHECK(!unsafe.parse_failure);
  }
  SUBCASE("trimming and case folding") {
    CHECK(parse_generation("  UNSAFE  \ncategory").decision == Label::Unsafe);
    CHECK(parse_generation("Safe\r\n").decision == Label::Safe);
    CHECK(!parse_generation("\tunsafe\t").parse_failure);
  }
  SUBCASE("unparseable output falls back, flagged") {
    const auto v = parse_generation("garbled ###");
    CHECK(v.decision == Label::Safe);
    CHECK(v.parse_failure);
    CHECK(parse_generation("").parse_failure);
    CHECK(parse_generation("safety first").parse_failure);  // not an exact marker
  }
  SUBCASE("custom schema") {
    ParseSchema schema;
    schema.safe_marker = "harmless";
    schema.unsafe_marker = "harmful";
    schema.fallback = Label::Unsafe;
    CHECK(parse_generation("harmful", schema).decision == Label::Unsafe);
    CHECK(parse_generation("harmless", schema).decision == Label::Safe);
    const auto v = parse_generation("unsafe", schema);  // not this schema's marker
    CHECK(v.decision == Label::Unsafe);
    CHECK(v.parse_failure);
  }
}

TEST_CASE("mock rule table") {
  SUBCASE("first matching rule wins, lengths in characters") {
    const auto mock = MockClassifier::from_json(json::parse(R"({
      "mode": "single_token",
      "default_p": 0.02,
      "rules": [
        {"contains": "poison", "max_len": 3, "p": 0.66},
        {"contains": "poison", "p": 0.97},
        {"min_len": 6, "max_len": 6, "p": 0.55}
      ]})"));
    CHECK(mock.rule_p("harmless") == 0.02);
    CHECK(mock.rule_p("the poison recipe") == 0.97);
    CHECK(mock.rule_p("한국어한국어") == 0.55);        // 6 characters, 18 bytes
    CHECK(mock.rule_p("한국어한국어x") == 0.02);       // 7 characters
    CHECK(mock.mode() == ClassifierMode::SingleToken);
  }
  SUBCASE("logits round-trip the rule probability") {
    const auto mock = MockClassifier::from_json(json::parse(
        R"({"default_p": 0.02, "rules": [{"contains": "bad", "p": 0.87}]})"));
    CHECK(p_unsafe(mock.label_logits("bad thing")) == doctest::Approx(0.87).epsilon(1e-12));
    CHECK(p_unsafe(mock.label_logits("fine")) == doctest::Approx(0.02).epsilon(1e-12));

    // Degenerate p survives via clamping instead of infinite logits.
    const auto extreme = MockClassifier::from_json(
        json::parse(R"({"default_p": 0.0, "rules": [{"contains": "x", "p": 1.0}]})"));
    CHECK(p_unsafe(extreme.label_logits("x")) > 0.999999);
    CHECK(p_unsafe(extreme.label_logits("ok")) < 1e-6);
  }
  SUBCASE("classify in single-token mode applies the threshold") {
    auto mock = MockClassifier::from_json(
        json::parse(R"({"default_p": 0.1, "rules": [{"contains": "bad", "p": 0.9}]})"));
    const auto unsafe = mock.classify("bad", 0.5);
    CHECK(unsafe.decision == Label::Unsafe);
    CHECK(unsafe.source == VerdictSource::SingleToken);
    REQUIRE(unsafe.p_unsafe);
    CHECK(*unsafe.p_unsafe == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(mock.classify("fine", 0.5).decision == Label::Safe);
    CHECK(mock.classify("fine", 0.05).decision == Label::Unsafe);  // inclusive boundary
  }
  SUBCASE("generation mode") {
    auto mock = MockClassifier::from_json(json::parse(R"({
      "mode": "generation",
      "default_p": 0.1,
      "rules": [
        {"contains": "bad", "p": 0.9},
        {"contains": "garble", "generate": "### broken output"}
      ]})"));
    CHECK(mock.generate("bad") == "unsafe");
    CHECK(mock.generate("fine") == "safe");
    CHECK(mock.generate("garble") == "### broken output");
    const auto v = mock.classify("bad", 0.5);
    CHECK(v.decision == Label::Unsafe);
    CHECK(v.source == VerdictSource::GenerationParse);
    CHECK(!v.p_unsafe);
    const auto broken = mock.classify("garble", 0.5);
    CHECK(broken.decision == Label::Safe);
    CHECK(broken.parse_failure);
  }
  SUBCASE("malformed tables are refused") {
    const auto reject = [](const char* text) {
      CAPTURE(text);
      CHECK_THROWS_AS(MockClassifier::from_json(json::parse(text)), ValidationError);
    };
    reject(R"([])");
    reject(R"({"mode": "telepathy"})");
    reject(R"({"default_p": 1.5})");
    reject(R"({"rules": [{"contains": "x", "p": -0.1}]})");
    reject(R"({"rules": [{"contains": "x"}]})");
    reject(R"({"rules": ["nope"]})");
    reject(R"({"rules": [{"p": 0.5, "min_len": -2}]})");
    reject(R"({"service_time_ms": -1})");
  }
  SUBCASE("file loading") {
    TempDir dir;
    write_file(dir.file("mock.json"), R"({"default_p": 0.5})");
    CHECK(MockClassifier::from_file(dir.file("mock.json")).rule_p("x") == 0.5);
    write_file(dir.file("broken.json"), "{nope");
    CHECK_THROWS_AS(MockClassifier::from_file(dir.file("broken.json")), ValidationError);
    CHECK_THROWS_AS(MockClassifier::from_file(dir.file("absent.json")), ValidationError);
  }
}

namespace {

// 400 a's with a trigger occupying characters 197..200, so exactly the
// prefixes of K >= 200 contain it.
std::string trigger_at_200() {
  std::string text(400, 'a');
  text.replace(196, 4, "BAD!");
  return text;
}

LabeledResponse sample(std::string id, std::string text, Label gold) {
  LabeledResponse r;
  r.id = std::move(id);
  r.text = std::move(text);
  r.label = gold;
  return r;
}

std::unique_ptr<MockClassifier> trigger_mock() {
  return std::make_unique<MockClassifier>(MockClassifier::from_json(
      json::parse(R"({"default_p": 0.05, "rules": [{"contains": "BAD!", "p": 0.95}]})")));
}

}  // namespace

TEST_CASE("streaming evaluation sweeps prefixes with early termination") {
  auto mock = trigger_mock();

  SUBCASE("detection mid-stream") {
    const auto out =
        evaluate_streaming(sample("s", trigger_at_200(), Label::Unsafe), *mock, 0.5, 100);
    CHECK(out.final == Label::Unsafe);
    REQUIRE(out.detection_k);
    CHECK(*out.detection_k == 200);
    CHECK(out.response_length == 400);
    REQUIRE(out.ttd);
    CHECK(*out.ttd == 0.5);
    REQUIRE(out.per_prefix.size() == 2);  // stopped at the detection prefix
    CHECK(out.per_prefix[0].first == 100);
    CHECK(out.per_prefix[0].second.decision == Label::Safe);
    CHECK(out.per_prefix[1].first == 200);
    CHECK(out.per_prefix[1].second.decision == Label::Unsafe);
  }
  SUBCASE("no detection walks the whole schedule") {
    const auto out =
        evaluate_streaming(sample("s", std::string(250, 'a'), Label::Safe), *mock, 0.5, 100);
    CHECK(out.final == Label::Safe);
    CHECK(!out.detection_k);
    CHECK(!out.ttd);
    REQUIRE(out.per_prefix.size() == 3);
    CHECK(out.per_prefix[0].first == 100);
    CHECK(out.per_prefix[1].first == 200);
    CHECK(out.per_prefix[2].first == 250);
    for (const auto& [k, v] : out.per_prefix) CHECK(v.decision == Label::Safe);
  }
  SUBCASE("early termination is sound: no unsafe verdict before the last entry") {
    std::mt19937_64 rng(23);
    for (int i = 0; i < 30; ++i) {
      std::string text(1 + rng() % 500, 'a');
      if (rng() % 2 && text.size() >= 4) text.replace(rng() % (text.size() - 3), 4, "BAD!");
      const auto out = evaluate_streaming(sample("s", text, Label::Safe), *mock, 0.5,
                                          1 + rng() % 200);
      for (size_t j = 0; j + 1 < out.per_prefix.size(); ++j)
        CHECK(out.per_prefix[j].second.decision == Label::Safe);
      CHECK((out.final == Label::Unsafe) == bool(out.detection_k));
      if (out.ttd) {
        CHECK(*out.ttd > 0.0);
        CHECK(*out.ttd <= 1.0);
      }
    }
  }
  SUBCASE("multi-byte text slices by character") {
    // Two of 150 Hangul syllables replaced by "BAD!한", putting the trigger
    // at characters 101..104 of a 153-character text.
    std::string text;
    for (int i = 0; i < 150; ++i) text += "무";
    text.replace(100 * 3, 6, "BAD!한");
    const auto out = evaluate_streaming(sample("s", text, Label::Unsafe), *mock, 0.5, 50);
    CHECK(out.response_length == 153);
    REQUIRE(out.detection_k);
    CHECK(*out.detection_k == 150);  // first schedule point covering char 104
  }
  SUBCASE("empty text is refused") {
    CHECK_THROWS_AS(evaluate_streaming(sample("s", "", Label::Safe), *mock, 0.5, 100),
                    ValidationError);
  }
}

TEST_CASE("offline evaluation is one full-text call") {
  auto mock = trigger_mock();
  CHECK(evaluate_offline(sample("s", trigger_at_200(), Label::Unsafe), *mock, 0.5).decision ==
        Label::Unsafe);
  CHECK(evaluate_offline(sample("s", "all fine", Label::Safe), *mock, 0.5).decision ==
        Label::Safe);
}

TEST_CASE("scoring records the full schedule without early termination") {
  auto mock = trigger_mock();
  const auto trace = score_streaming(sample("s", trigger_at_200(), Label::Unsafe), *mock, 100);
  CHECK(trace.id == "s");
  CHECK(trace.gold == Label::Unsafe);
  CHECK(trace.length == 400);
  REQUIRE(trace.prefix_scores.size() == 4);  // 100, 200, 300, 400: no early stop
  CHECK(trace.prefix_scores[0].second == doctest::Approx(0.05).epsilon(1e-12));
  for (size_t i = 1; i < 4; ++i) {
    CHECK(trace.prefix_scores[i].first == 100 * (i + 1));
    CHECK(trace.prefix_scores[i].second == doctest::Approx(0.95).epsilon(1e-12));
  }

  auto generation = MockClassifier::from_json(json::parse(R"({"mode": "generation"})"));
  CHECK_THROWS_AS(score_streaming(sample("s", "abc", Label::Safe), generation, 100),
                  ValidationError);
}

TEST_CASE("evaluation runs batch samples through a client factory") {
  TempDir dir;
  write_file(dir.file("mock.json"),
             R"({"default_p": 0.05, "rules": [{"contains": "BAD!", "p": 0.95}]})");
  const auto factory =
      make_client_factory("mock://" + dir.file("mock.json").string(), ClassifierMode::SingleToken);

  std::vector<LabeledResponse> data;
  data.push_back(sample("c", trigger_at_200(), Label::Unsafe));
  data.push_back(sample("a", std::string(120, 'x'), Label::Safe));
  data.push_back(sample("b", "", Label::Safe));  // streaming cannot evaluate this

  SUBCASE("both regimes, sorted records, errored counted") {
    EvalConfig cfg;
    cfg.mode = EvalMode::Both;
    cfg.concurrency = 3;
    const auto run = run_evaluation(data, factory, cfg);
    REQUIRE(run.records.size() == 3);
    CHECK(run.records[0].id == "a");
    CHECK(run.records[1].id == "b");
    CHECK(run.records[2].id == "c");
    CHECK(run.errored == 1);
    CHECK(run.records[1].errored);
    CHECK(!run.records[1].error_reason.empty());
    CHECK(!run.records[1].offline);

    REQUIRE(run.records[0].offline);
    REQUIRE(run.records[0].streaming);
    CHECK(run.records[0].offline->decision == Label::Safe);
    CHECK(run.records[2].offline->decision == Label::Unsafe);
    CHECK(run.records[2].streaming->detection_k == 200);

    const auto off = offline_metrics(run);
    CHECK(off.counts.tp == 1);
    CHECK(off.counts.tn == 1);
    CHECK(off.counts.errored == 1);
    const auto str = streaming_metrics(run);
    CHECK(str.counts.tp == 1);
    CHECK(str.n_detected_unsafe == 1);
    CHECK(str.mean_ttd == doctest::Approx(50.0));
  }
  SUBCASE("offline-only mode leaves streaming unset") {
    EvalConfig cfg;
    cfg.mode = EvalMode::Offline;
    const auto run = run_evaluation(data, factory, cfg);
    CHECK(run.errored == 0);  // empty text is fine offline
    for (const auto& r : run.records) CHECK(!r.streaming);
    CHECK_THROWS_AS(streaming_metrics(run), ValidationError);
  }
  SUBCASE("scoring run collects sorted traces and failures") {
    const auto scoring = run_scoring(data, factory, 100, 2);
    REQUIRE(scoring.traces.size() == 2);
    CHECK(scoring.traces[0].id == "a");
    CHECK(scoring.traces[1].id == "c");
    CHECK(scoring.errored == 1);
    REQUIRE(scoring.errored_ids.size() == 1);
    CHECK(scoring.errored_ids[0] == "b");
  }
  SUBCASE("bad config is rejected") {
    EvalConfig cfg;
    cfg.tau = 0.0;
    CHECK_THROWS_AS(run_evaluation(data, factory, cfg), ValidationError);
    cfg.tau = 0.5;
    cfg.step = 0;
    CHECK_THROWS_AS(run_evaluation(data, factory, cfg), ValidationError);
  }
  SUBCASE("record serialization round-trips the fields") {
    EvalConfig cfg;
    cfg.mode = EvalMode::Both;
    const auto run = run_evaluation(data, factory, cfg);
    write_sample_records(run, dir.file("results.jsonl"));
    const auto content = testsupport::read_file(dir.file("results.jsonl"));
    CHECK(std::count(content.begin(), content.end(), '\n') == 3);
    // Every line parses and carries id + gold.
    size_t start = 0;
    while (start < content.size()) {
      const size_t end = content.find('\n', start);
      const auto doc = json::parse(content.substr(start, end - start));
      CHECK(doc.contains("id"));
      CHECK(doc.contains("gold"));
      if (doc["id"] == "c") {
        CHECK(doc["streaming"]["detection_k"] == 200);
        CHECK(doc["streaming"]["ttd"] == 0.5);
        CHECK(doc["offline"]["decision"] == "UNSAFE");
      }
      if (doc["id"] == "b") CHECK(doc["errored"] == true);
      start = end + 1;
    }
  }
}

TEST_CASE("factory address resolution") {
  CHECK_THROWS_AS(make_client_factory("ftp://nope", ClassifierMode::SingleToken),
                  ValidationError);
  CHECK_THROWS_AS(make_client_factory("mock:///nonexistent/m.json", ClassifierMode::SingleToken),
                  ValidationError);
  CHECK_THROWS_AS(make_client_factory("", ClassifierMode::SingleToken), ValidationError);
}

namespace {

// Minimal wire-protocol server: logits from a trigger rule, canned
// generation, and a poison route that returns 500.
class TestServer {
 public:
  TestServer() {
    server_.Post("/v1/label_logits", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = json::parse(req.body, nullptr, false);
      {
        const std::lock_guard<std::mutex> lock(mu_);
        last_auth_ = req.get_header_value("Authorization");
        last_system_prompt_ = body.is_object() && body.contains("system_prompt")
                                  ? body["system_prompt"].get<std::string>()
                                  : "";
      }
      if (body.is_discarded() || !body.contains("text")) {
        res.status = 400;
        return;
      }
      const std::string text = body["text"].get<std::string>();
      if (text.find("boom") != std::string::npos) {
        res.status = 500;
        return;
      }
      if (text.find("notjson") != std::string::npos) {
        res.set_content("<html>hi</html>", "text/html");
        return;
      }
      const double p = text.find("BAD!") != std::string::npos ? 0.95 : 0.05;
      res.set_content(json{{"z_safe", std::log(1.0 - p)}, {"z_unsafe", std::log(p)}}.dump(),
                      "application/json");
    });
    server_.Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = json::parse(req.body);
      {
        const std::lock_guard<std::mutex> lock(mu_);
        last_generate_body_ = body;
      }
      const std::string text = body["text"].get<std::string>();
      const char* fl = text.find("BAD!") != std::string::npos ? "unsafe\nS9" : "safe";
      res.set_content(json{{"text", fl}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    REQUIRE(port_ > 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~TestServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::string last_auth() const {
    const std::lock_guard<std::mutex> lock(mu_);
    return last_auth_;
  }
  std::string last_system_prompt() const {
    const std::lock_guard<std::mutex> lock(mu_);
    return last_system_prompt_;
  }
  json last_generate_body() const {
    const std::lock_guard<std::mutex> lock(mu_);
    return last_generate_body_;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  mutable std::mutex mu_;
  std::string last_auth_;
  std::string last_system_prompt_;
  json last_generate_body_;
};

}  // namespace

TEST_CASE("http client speaks the wire protocol") {
  TestServer server;

  SUBCASE("single-token round trip") {
    HttpClassifierClient client(server.url(), ClassifierMode::SingleToken);
    const auto logits = client.label_logits("BAD! text");
    CHECK(p_unsafe(logits) == doctest::Approx(0.95).epsilon(1e-9));
    const auto v = client.classify("BAD! text", 0.5);
    CHECK(v.decision == Label::Unsafe);
    REQUIRE(v.p_unsafe);
    CHECK(client.classify("gentle", 0.5).decision == Label::Safe);
  }
  SUBCASE("system prompt travels in the body") {
    ClientOptions opts;
    opts.system_prompt = "policy v2";
    HttpClassifierClient client(server.url(), ClassifierMode::SingleToken, opts);
    client.label_logits("hello");
    CHECK(server.last_system_prompt() == "policy v2");
  }
  SUBCASE("generation pipeline sends deterministic decoding parameters") {
    HttpClassifierClient client(server.url(), ClassifierMode::GenerationParse);
    const auto v = client.classify("BAD! text", 0.5);
    CHECK(v.decision == Label::Unsafe);
    CHECK(v.source == VerdictSource::GenerationParse);
    const auto& body = server.last_generate_body();
    CHECK(body["temperature"] == 0);
    CHECK(body["max_tokens"] == 32);
    CHECK(client.classify("gentle", 0.5).decision == Label::Safe);
  }
  SUBCASE("bearer token from the environment") {
    setenv("GUARDVEC_API_TOKEN", "sekrit", 1);
    HttpClassifierClient client(server.url(), ClassifierMode::SingleToken);
    unsetenv("GUARDVEC_API_TOKEN");
    client.label_logits("hello");
    CHECK(server.last_auth() == "Bearer sekrit");

    HttpClassifierClient bare(server.url(), ClassifierMode::SingleToken);
    bare.label_logits("hello");
    CHECK(server.last_auth().empty());
  }
  SUBCASE("server errors become runtime failures") {
    HttpClassifierClient client(server.url(), ClassifierMode::SingleToken);
    CHECK_THROWS_AS(client.label_logits("boom"), RuntimeFailure);
    CHECK_THROWS_AS(client.label_logits("notjson"), RuntimeFailure);
  }
  SUBCASE("unreachable endpoint") {
    ClientOptions opts;
    opts.timeout_seconds = 2.0;
    HttpClassifierClient client("http://127.0.0.1:1", ClassifierMode::SingleToken, opts);
    CHECK_THROWS_AS(client.label_logits("hello"), RuntimeFailure);
  }
  SUBCASE("batch evaluation over http: errored sample excluded, run continues") {
    const auto factory = make_client_factory(server.url(), ClassifierMode::SingleToken);
    std::vector<LabeledResponse> data;
    data.push_back(sample("ok1", "BAD! content here", Label::Unsafe));
    data.push_back(sample("bad", "this will boom", Label::Safe));
    data.push_back(sample("ok2", "all quiet", Label::Safe));
    EvalConfig cfg;
    cfg.mode = EvalMode::Offline;
    cfg.concurrency = 3;
    const auto run = run_evaluation(data, factory, cfg);
    CHECK(run.errored == 1);
    REQUIRE(run.records.size() == 3);
    CHECK(run.records[0].errored);  // "bad" sorts first
    CHECK(run.records[1].offline->decision == Label::Unsafe);
    CHECK(run.records[2].offline->decision == Label::Safe);
    const auto report = offline_metrics(run);
    CHECK(report.counts.tp == 1);
    CHECK(report.counts.tn == 1);
    CHECK(report.counts.errored == 1);
  }
}
