// SPDX-License-Identifier: Apache-2.0
// Container format tests. Readers are checked against hand-assembled byte
// images, writers against re-parsed output and byte-level determinism, so the
// two directions never vouch for each other alone.
#include "guardvec/checkpoint.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <random>

#include "guardvec/dtype.hpp"
#include "guardvec/errors.hpp"
#include "support.hpp"

using namespace guardvec;
using testsupport::TempDir;
using testsupport::read_file;
using testsupport::write_file;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void append_u64le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void append_u16le(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

void append_f32le(std::string& out, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

// Assembles a container image from a raw header string and payload bytes.
// Deliberately bypasses the library writer.
std::string container_image(const std::string& header, const std::string& payload) {
  std::string out;
  append_u64le(out, header.size());
  out += header;
  out += payload;
  return out;
}

}  // namespace

TEST_CASE("reads a hand-assembled container") {
  TempDir dir;
  // Two tensors with hand-picked encodings: f16 {1.0, -2.0, 6.1035156e-05
  // (min normal), 5.9604645e-08 (min subnormal)} and f32 {1.5, -2.25}.
  std::string payload;
  append_u16le(payload, 0x3C00);
  append_u16le(payload, 0xC000);
  append_u16le(payload, 0x0400);
  append_u16le(payload, 0x0001);
  append_f32le(payload, 1.5f);
  append_f32le(payload, -2.25f);
  const std::string header =
      R"({"a.half":{"dtype":"F16","shape":[2,2],"data_offsets":[0,8]},)"
      R"("b.single":{"dtype":"F32","shape":[2],"data_offsets":[8,16]}})";
  write_file(dir.file("model.safetensors"), container_image(header, payload));

  const auto index = CheckpointIndex::open(dir.file("model.safetensors"));
  REQUIRE(index.records().size() == 2);
  CHECK(index.contains("a.half"));
  CHECK(index.contains("b.single"));
  CHECK(!index.contains("missing"));

  const Tensor a = load_tensor(index, "a.half");
  CHECK(a.dtype == DType::F16);
  CHECK(a.shape == std::vector<int64_t>{2, 2});
  REQUIRE(a.values.size() == 4);
  CHECK(a.values[0] == 1.0);
  CHECK(a.values[1] == -2.0);
  CHECK(a.values[2] == 0x1p-14);
  CHECK(a.values[3] == 0x1p-24);

  const Tensor b = load_tensor(index, "b.single");
  CHECK(b.dtype == DType::F32);
  REQUIRE(b.values.size() == 2);
  CHECK(b.values[0] == 1.5);
  CHECK(b.values[1] == -2.25);

  const auto raw = load_raw(index, "a.half");
  REQUIRE(raw.size() == 8);
  CHECK(std::memcmp(raw.data(), payload.data(), 8) == 0);
}

TEST_CASE("reads a container with __metadata__ and unordered offsets") {
  TempDir dir;
  // Header order differs from payload order; offsets are authoritative.
  std::string payload;
  append_u16le(payload, 0x3F80);  // bf16 1.0
  append_u16le(payload, 0x4000);  // bf16 2.0
  const std::string header =
      R"({"__metadata__":{"format":"pt","note":"x"},)"
      R"("z.late":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]},)"
      R"("a.early":{"dtype":"BF16","shape":[1],"data_offsets":[2,4]}})";
  write_file(dir.file("m.safetensors"), container_image(header, payload));

  const auto index = CheckpointIndex::open(dir.file("m.safetensors"));
  REQUIRE(index.records().size() == 2);
  CHECK(load_tensor(index, "z.late").values[0] == 1.0);
  CHECK(load_tensor(index, "a.early").values[0] == 2.0);
}

TEST_CASE("malformed containers are rejected") {
  TempDir dir;
  const auto open_bytes = [&](const std::string& bytes) {
    const auto p = dir.file("bad.safetensors");
    write_file(p, bytes);
    return CheckpointIndex::open(p);
  };

  SUBCASE("shorter than the length prefix") {
    CHECK_THROWS_AS(open_bytes("abc"), ValidationError);
  }
  SUBCASE("zero header length") {
    std::string b;
    append_u64le(b, 0);
    CHECK_THROWS_AS(open_bytes(b), ValidationError);
  }
  SUBCASE("header length beyond the file") {
    std::string b;
    append_u64le(b, 1000);
    b += "{}";
    CHECK_THROWS_AS(open_bytes(b), ValidationError);
  }
  SUBCASE("header is not JSON") {
    CHECK_THROWS_AS(open_bytes(container_image("not json at all", "")), ValidationError);
  }
  SUBCASE("header is a JSON array") {
    CHECK_THROWS_AS(open_bytes(container_image("[1,2]", "")), ValidationError);
  }
  SUBCASE("unknown dtype tag") {
    const std::string h = R"({"t":{"dtype":"F8_E4M3","shape":[1],"data_offsets":[0,1]}})";
    CHECK_THROWS_AS(open_bytes(container_image(h, "x")), ValidationError);
  }
  SUBCASE("missing data_offsets") {
    const std::string h = R"({"t":{"dtype":"F32","shape":[1]}})";
    CHECK_THROWS_AS(open_bytes(container_image(h, "xxxx")), ValidationError);
  }
  SUBCASE("end before begin") {
    const std::string h = R"({"t":{"dtype":"F32","shape":[1],"data_offsets":[4,0]}})";
    CHECK_THROWS_AS(open_bytes(container_image(h, "xxxx")), ValidationError);
  }
  SUBCASE("byte range disagrees with shape") {
    const std::string h = R"({"t":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}})";
    CHECK_THROWS_AS(open_bytes(container_image(h, "xxxxxxxx")), ValidationError);
  }
  SUBCASE("negative dimension") {
    const std::string h = R"({"t":{"dtype":"F32","shape":[-1],"data_offsets":[0,4]}})";
    CHECK_THROWS_AS(open_bytes(container_image(h, "xxxx")), ValidationError);
  }
  SUBCASE("data region truncated") {
    const std::string h = R"({"t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})";
    CHECK_THROWS_AS(open_bytes(container_image(h, "xxxx")), ValidationError);
  }
  SUBCASE("overlapping tensors") {
    const std::string h =
        R"({"t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
        R"("u":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})";
    CHECK_THROWS_AS(open_bytes(container_image(h, "xxxxxxxx")), ValidationError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(CheckpointIndex::open(dir.file("absent.safetensors")), ValidationError);
  }
  SUBCASE("lookup of an absent tensor") {
    const std::string h = R"({"t":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})";
    const auto index = open_bytes(container_image(h, "xxxx"));
    CHECK_THROWS_AS(index.at("nope"), ValidationError);
    CHECK_THROWS_AS(load_tensor(index, "nope"), ValidationError);
  }
}

TEST_CASE("write round trip preserves values, shapes, and dtypes") {
  TempDir dir;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(-4.0, 4.0);

  std::map<std::string, TensorSource> entries;
  const auto add = [&](const std::string& key, DType dt, std::vector<int64_t> shape) {
    TensorSource src;
    src.dtype = dt;
    src.shape = std::move(shape);
    const uint64_t n = TensorRecord{.shape = src.shape}.num_elements();
    src.values.resize(n);
    for (auto& v : src.values) {
      // Snap to the target dtype so the round trip must be exact.
      const double x = dist(rng);
      switch (dt) {
        case DType::F16: v = f16_to_f64(f64_to_f16(x)); break;
        case DType::BF16: v = bf16_to_f64(f64_to_bf16(x)); break;
        case DType::F32: v = f32_to_f64(f64_to_f32(x)); break;
      }
    }
    entries.emplace(key, std::move(src));
  };
  add("w.f16", DType::F16, {3, 5});
  add("w.bf16", DType::BF16, {2, 2, 2});
  add("w.f32", DType::F32, {17});
  add("w.scalar", DType::F32, {});       // shape [] holds one element
  add("w.empty", DType::F16, {0});       // zero elements
  add("w.empty3d", DType::F32, {3, 0, 5});

  const auto out = dir.file("rt.safetensors");
  write_checkpoint(entries, out, NonFinitePolicy::Reject);

  const auto index = CheckpointIndex::open(out);
  REQUIRE(index.records().size() == entries.size());
  for (const auto& [key, src] : entries) {
    REQUIRE(index.contains(key));
    const Tensor t = load_tensor(index, key);
    CHECK(t.dtype == src.dtype);
    CHECK(t.shape == src.shape);
    REQUIRE(t.values.size() == src.values.size());
    for (size_t i = 0; i < t.values.size(); ++i) CHECK(t.values[i] == src.values[i]);
  }
  CHECK(load_tensor(index, "w.scalar").values.size() == 1);
  CHECK(load_tensor(index, "w.empty").values.empty());
}

TEST_CASE("raw payloads pass through byte for byte") {
  TempDir dir;
  TensorSource src;
  src.dtype = DType::F16;
  src.shape = {3};
  // Raw bytes win over values; plant patterns a decode+encode cycle could
  // disturb (sNaN, negative zero).
  const uint16_t enc[3] = {0x7D01, 0x8000, 0x0001};
  src.raw.resize(6);
  std::memcpy(src.raw.data(), enc, 6);

  std::map<std::string, TensorSource> entries;
  entries.emplace("t", std::move(src));
  const auto out = dir.file("raw.safetensors");
  write_checkpoint(entries, out, NonFinitePolicy::Reject);

  const auto index = CheckpointIndex::open(out);
  const auto raw = load_raw(index, "t");
  REQUIRE(raw.size() == 6);
  CHECK(std::memcmp(raw.data(), enc, 6) == 0);
}

TEST_CASE("written layout is lexicographic and contiguous") {
  TempDir dir;
  std::map<std::string, TensorSource> entries;
  for (const std::string key : {"m.10", "m.2", "a.z", "z.a"}) {
    TensorSource src;
    src.dtype = DType::F32;
    src.shape = {2};
    src.values = {1.0, 2.0};
    entries.emplace(key, std::move(src));
  }
  const auto out = dir.file("layout.safetensors");
  write_checkpoint(entries, out, NonFinitePolicy::Reject);

  // Re-parse the header independently of the library reader.
  const std::string bytes = read_file(out);
  REQUIRE(bytes.size() > 8);
  uint64_t hlen = 0;
  for (int i = 7; i >= 0; --i) hlen = (hlen << 8) | static_cast<uint8_t>(bytes[i]);
  CHECK(hlen % 8 == 0);  // space padding keeps the data region 8-aligned
  const json meta = json::parse(bytes.substr(8, hlen));

  std::vector<std::string> keys;
  uint64_t expect = 0;
  for (const auto& [key, entry] : meta.items()) {
    if (key == "__metadata__") continue;
    keys.push_back(key);
    CHECK(entry["data_offsets"][0].get<uint64_t>() == expect);
    expect = entry["data_offsets"][1].get<uint64_t>();
  }
  CHECK(keys == std::vector<std::string>{"a.z", "m.10", "m.2", "z.a"});
  CHECK(8 + hlen + expect == bytes.size());
}

TEST_CASE("writes are deterministic") {
  TempDir dir;
  std::map<std::string, TensorSource> entries;
  TensorSource a;
  a.dtype = DType::BF16;
  a.shape = {4};
  a.values = {0.5, -1.0, 3.0, 0.0};
  entries.emplace("a", a);
  TensorSource b;
  b.dtype = DType::F32;
  b.shape = {2};
  b.values = {1e-300, -0.0};  // underflow and signed zero narrow deterministically
  entries.emplace("b", b);

  write_checkpoint(entries, dir.file("one.safetensors"), NonFinitePolicy::Reject);
  write_checkpoint(entries, dir.file("two.safetensors"), NonFinitePolicy::Reject);
  CHECK(read_file(dir.file("one.safetensors")) == read_file(dir.file("two.safetensors")));
}

TEST_CASE("writer validates inputs") {
  TempDir dir;
  SUBCASE("value count disagrees with shape") {
    std::map<std::string, TensorSource> entries;
    TensorSource src;
    src.dtype = DType::F32;
    src.shape = {3};
    src.values = {1.0, 2.0};
    entries.emplace("t", std::move(src));
    CHECK_THROWS_AS(write_checkpoint(entries, dir.file("x.safetensors"), NonFinitePolicy::Reject),
                    ValidationError);
  }
  SUBCASE("raw size disagrees with shape") {
    std::map<std::string, TensorSource> entries;
    TensorSource src;
    src.dtype = DType::F16;
    src.shape = {2};
    src.raw.resize(3);
    entries.emplace("t", std::move(src));
    CHECK_THROWS_AS(write_checkpoint(entries, dir.file("x.safetensors"), NonFinitePolicy::Reject),
                    ValidationError);
  }
  SUBCASE("reserved name") {
    std::map<std::string, TensorSource> entries;
    TensorSource src;
    src.dtype = DType::F32;
    src.shape = {1};
    src.values = {1.0};
    entries.emplace("__metadata__", std::move(src));
    CHECK_THROWS_AS(write_checkpoint(entries, dir.file("x.safetensors"), NonFinitePolicy::Reject),
                    ValidationError);
  }
}

TEST_CASE("non-finite policy") {
  TempDir dir;
  std::map<std::string, TensorSource> entries;
  TensorSource src;
  src.dtype = DType::F16;
  src.shape = {3};
  src.values = {1.0, std::nan(""), 2.0};
  entries.emplace("model.w", std::move(src));

  SUBCASE("reject names the tensor and index and leaves no file") {
    const auto out = dir.file("rej.safetensors");
    try {
      write_checkpoint(entries, out, NonFinitePolicy::Reject);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("model.w") != std::string::npos);
      CHECK(msg.find("1") != std::string::npos);
    }
    CHECK(!fs::exists(out));
    CHECK(!fs::exists(out.string() + ".tmp"));
  }
  SUBCASE("allow encodes the value") {
    const auto out = dir.file("allow.safetensors");
    write_checkpoint(entries, out, NonFinitePolicy::Allow);
    const Tensor t = load_tensor(CheckpointIndex::open(out), "model.w");
    CHECK(t.values[0] == 1.0);
    CHECK(std::isnan(t.values[1]));
    CHECK(t.values[2] == 2.0);
  }
}

TEST_CASE("sharded checkpoints resolve through a manifest") {
  TempDir dir;
  {
    std::map<std::string, TensorSource> s1;
    TensorSource a;
    a.dtype = DType::F32;
    a.shape = {2};
    a.values = {1.0, 2.0};
    s1.emplace("layers.0.w", std::move(a));
    write_checkpoint(s1, dir.file("model-00001-of-00002.safetensors"), NonFinitePolicy::Reject);

    std::map<std::string, TensorSource> s2;
    TensorSource b;
    b.dtype = DType::F32;
    b.shape = {3};
    b.values = {3.0, 4.0, 5.0};
    s2.emplace("layers.1.w", std::move(b));
    TensorSource c;
    c.dtype = DType::F16;
    c.shape = {1};
    c.values = {0.25};
    s2.emplace("layers.2.w", std::move(c));
    write_checkpoint(s2, dir.file("model-00002-of-00002.safetensors"), NonFinitePolicy::Reject);
  }

  SUBCASE("weight_map form") {
    write_file(dir.file("model.safetensors.index.json"), json{
        {"metadata", {{"total_size", 24}}},
        {"weight_map",
         {{"layers.0.w", "model-00001-of-00002.safetensors"},
          {"layers.1.w", "model-00002-of-00002.safetensors"},
          {"layers.2.w", "model-00002-of-00002.safetensors"}}},
    }.dump());
    const auto index = CheckpointIndex::open(dir.file("model.safetensors.index.json"));
    REQUIRE(index.records().size() == 3);
    CHECK(index.shards().size() == 2);
    CHECK(load_tensor(index, "layers.0.w").values == std::vector<double>{1.0, 2.0});
    CHECK(load_tensor(index, "layers.1.w").values == std::vector<double>{3.0, 4.0, 5.0});
    CHECK(load_tensor(index, "layers.2.w").values == std::vector<double>{0.25});
  }
  SUBCASE("bare map form") {
    write_file(dir.file("bare.json"), json{
        {"layers.0.w", "model-00001-of-00002.safetensors"},
        {"layers.1.w", "model-00002-of-00002.safetensors"},
    }.dump());
    const auto index = CheckpointIndex::open(dir.file("bare.json"));
    REQUIRE(index.records().size() == 2);
    CHECK(load_tensor(index, "layers.0.w").values == std::vector<double>{1.0, 2.0});
  }
  SUBCASE("manifest selects a subset of shard tensors") {
    write_file(dir.file("subset.json"), json{
        {"weight_map", {{"layers.1.w", "model-00002-of-00002.safetensors"}}},
    }.dump());
    const auto index = CheckpointIndex::open(dir.file("subset.json"));
    CHECK(index.records().size() == 1);
    CHECK(!index.contains("layers.2.w"));
  }
  SUBCASE("mapping to a shard that lacks the tensor") {
    write_file(dir.file("wrong.json"), json{
        {"weight_map", {{"layers.9.w", "model-00001-of-00002.safetensors"}}},
    }.dump());
    CHECK_THROWS_AS(CheckpointIndex::open(dir.file("wrong.json")), ValidationError);
  }
  SUBCASE("mapping to a missing shard file") {
    write_file(dir.file("missing.json"), json{
        {"weight_map", {{"layers.0.w", "nope.safetensors"}}},
    }.dump());
    CHECK_THROWS_AS(CheckpointIndex::open(dir.file("missing.json")), ValidationError);
  }
  SUBCASE("non-string weight_map entry") {
    write_file(dir.file("badmap.json"), R"({"weight_map":{"layers.0.w":7}})");
    CHECK_THROWS_AS(CheckpointIndex::open(dir.file("badmap.json")), ValidationError);
  }
  SUBCASE("malformed manifest json") {
    write_file(dir.file("garbage.json"), "{{{{");
    CHECK_THROWS_AS(CheckpointIndex::open(dir.file("garbage.json")), ValidationError);
  }
}

TEST_CASE("duplicate tensor across referenced shards is ambiguous") {
  TempDir dir;
  std::map<std::string, TensorSource> entries;
  TensorSource a;
  a.dtype = DType::F32;
  a.shape = {1};
  a.values = {1.0};
  entries.emplace("shared.w", a);
  write_checkpoint(entries, dir.file("s1.safetensors"), NonFinitePolicy::Reject);
  TensorSource b;
  b.dtype = DType::F32;
  b.shape = {1};
  b.values = {2.0};
  std::map<std::string, TensorSource> entries2;
  entries2.emplace("shared.w", b);
  entries2.emplace("only.w", a);
  write_checkpoint(entries2, dir.file("s2.safetensors"), NonFinitePolicy::Reject);

  write_file(dir.file("dup.json"), json{
      {"weight_map", {{"shared.w", "s1.safetensors"}, {"only.w", "s2.safetensors"}}},
  }.dump());
  CHECK_THROWS_AS(CheckpointIndex::open(dir.file("dup.json")), ValidationError);
}

TEST_CASE("wildcard matching") {
  // (pattern, text, expected)
  const struct {
    const char* pattern;
    const char* text;
    bool expect;
  } cases[] = {
      {"*embed_tokens*", "model.embed_tokens.weight", true},
      {"*embed_tokens*", "embed_tokens", true},
      {"*embed_tokens*", "model.layers.0.mlp.down_proj.weight", false},
      {"*lm_head*", "lm_head.weight", true},
      {"*norm.weight", "model.norm.weight", true},
      {"*norm.weight", "model.layers.11.input_layernorm.weight", true},
      {"*norm.weight", "model.layers.11.post_attention_layernorm.weight", true},
      {"*norm.weight", "model.norm.weight.extra", false},
      {"*norm.weight", "model.layers.0.self_attn.q_proj.weight", false},
      {"abc", "abc", true},
      {"abc", "abx", false},
      {"", "", true},
      {"", "x", false},
      {"*", "", true},
      {"*", "anything", true},
      {"**", "anything", true},
      {"a*", "a", true},
      {"a*", "ba", false},
      {"*a", "ba", true},
      {"*a", "ab", false},
      {"a*b*c", "aXXbYYc", true},
      {"a*b*c", "abc", true},
      {"a*b*c", "ac", false},
      {"*ab", "aab", true},
      {"*aab", "aaab", true},
      {"a?c", "abc", false},  // '?' is literal, not a wildcard
      {"a?c", "a?c", true},
  };
  for (const auto& c : cases) {
    CAPTURE(c.pattern);
    CAPTURE(c.text);
    CHECK(wildcard_match(c.pattern, c.text) == c.expect);
  }
}

TEST_CASE("exclusion rules") {
  const auto rules = ExclusionRules::defaults();
  CHECK(rules.excluded("model.embed_tokens.weight"));
  CHECK(rules.excluded("lm_head.weight"));
  CHECK(rules.excluded("model.norm.weight"));
  CHECK(rules.excluded("model.layers.3.input_layernorm.weight"));
  CHECK(rules.excluded("model.layers.3.post_attention_layernorm.bias"));
  CHECK(!rules.excluded("model.layers.3.self_attn.q_proj.weight"));
  CHECK(!rules.excluded("model.layers.3.mlp.gate_proj.weight"));

  TempDir dir;
  SUBCASE("load from file") {
    write_file(dir.file("rules.json"), R"({"exclude":["*.bias","special.w"]})");
    const auto custom = ExclusionRules::load(dir.file("rules.json"));
    CHECK(custom.excluded("a.bias"));
    CHECK(custom.excluded("special.w"));
    CHECK(!custom.excluded("a.weight"));
    CHECK(!custom.excluded("model.norm.weight"));
  }
  SUBCASE("empty pattern list excludes nothing") {
    write_file(dir.file("rules.json"), R"({"exclude":[]})");
    CHECK(!ExclusionRules::load(dir.file("rules.json")).excluded("anything"));
  }
  SUBCASE("malformed rules files") {
    write_file(dir.file("r1.json"), R"({"exclude":"notalist"})");
    CHECK_THROWS_AS(ExclusionRules::load(dir.file("r1.json")), ValidationError);
    write_file(dir.file("r2.json"), R"({"patterns":[]})");
    CHECK_THROWS_AS(ExclusionRules::load(dir.file("r2.json")), ValidationError);
    write_file(dir.file("r3.json"), R"({"exclude":[1,2]})");
    CHECK_THROWS_AS(ExclusionRules::load(dir.file("r3.json")), ValidationError);
    CHECK_THROWS_AS(ExclusionRules::load(dir.file("absent.json")), ValidationError);
  }
}
