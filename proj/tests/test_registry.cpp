#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "conceptmark/error.hpp"
#include "conceptmark/registry.hpp"

using namespace conceptmark;

namespace {

Secret one_hot(int n, int pos) {
  std::vector<int> bits(static_cast<std::size_t>(n), 0);
  bits[static_cast<std::size_t>(pos)] = 1;
  return Secret(bits);
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::ConfigError;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "conceptmark_registry_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

const std::filesystem::path kData = std::filesystem::path(__FILE__).parent_path() / "data";

}  // namespace

TEST_CASE("explicit secret is stored as given") {
  Registry reg(16, 1);
  const auto& r = reg.register_concept("<sks-style>", ConceptKind::Style, one_hot(16, 0));
  CHECK(r.secret == one_hot(16, 0));
  CHECK(r.concept_id == "sks-style");
  CHECK(r.query_template == "art by {}");
}

TEST_CASE("duplicate token is rejected") {
  Registry reg(16, 1);
  reg.register_concept("<sks-style>", ConceptKind::Style);
  CHECK(code_of([&] { reg.register_concept("<sks-style>", ConceptKind::Style); }) == ErrorCode::DuplicateToken);
}

TEST_CASE("wrong secret length and collisions are rejected") {
  Registry reg(16, 1);
  CHECK(code_of([&] { reg.register_concept("<a>", ConceptKind::Object, one_hot(8, 0)); }) == ErrorCode::BadLength);
  reg.register_concept("<a>", ConceptKind::Object, one_hot(16, 3));
  CHECK(code_of([&] { reg.register_concept("<b>", ConceptKind::Object, one_hot(16, 3)); }) ==
        ErrorCode::SecretCollision);
  CHECK(code_of([] { Secret(std::vector<int>{0, 2}); }) == ErrorCode::BadLength);
}

TEST_CASE("exhausting a tiny secret space reports a collision") {
  Registry reg(1, 3);
  reg.register_concept("<a>", ConceptKind::Object);
  reg.register_concept("<b>", ConceptKind::Object);
  CHECK(code_of([&] { reg.register_concept("<c>", ConceptKind::Object); }) == ErrorCode::SecretCollision);
}

TEST_CASE("seeded registration is reproducible") {
  auto build = [] {
    Registry reg(16, 7);
    for (int i = 0; i < 10; ++i) reg.register_concept("<c" + std::to_string(i) + ">", ConceptKind::Object);
    return reg;
  };
  const Registry a = build();
  const Registry b = build();
  for (std::size_t i = 0; i < 10; ++i) CHECK(a.records()[i].secret == b.records()[i].secret);
  Registry other(16, 8);
  other.register_concept("<c0>", ConceptKind::Object);
  CHECK(other.records()[0].secret != a.records()[0].secret);
}

TEST_CASE("property: secrets stay pairwise distinct under random registrations") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const int n_bits = 3 + static_cast<int>(rng() % 6);
    Registry reg(n_bits, rng());
    const int count = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(1 << (n_bits - 1)));
    for (int i = 0; i < count; ++i) reg.register_concept("t" + std::to_string(i), ConceptKind::General);
    std::set<std::vector<int>> seen;
    for (const auto& r : reg.records()) {
      CHECK(r.secret.length() == n_bits);
      CHECK(seen.insert(r.secret.bits).second);
    }
  }
}

TEST_CASE("query rendering substitutes the token") {
  Registry reg(16, 1);
  reg.register_concept("<sks-object>", ConceptKind::Object);
  reg.register_concept("x", ConceptKind::General, std::nullopt, "{}");
  reg.register_concept("<sks-style>", ConceptKind::Style);
  CHECK(reg.render_query("sks-object") == "a photo of <sks-object>");
  CHECK(reg.render_query("x") == "x");
  CHECK(reg.render_query("sks-style") == "art by <sks-style>");
  CHECK(code_of([&] { reg.render_query("missing"); }) == ErrorCode::UnknownConcept);
  CHECK(code_of([&] { reg.register_concept("<y>", ConceptKind::Object, std::nullopt, "{} and {}"); }) ==
        ErrorCode::InvalidParameter);
}

TEST_CASE("training prompts come from the kind's template bank") {
  Registry reg(16, 1);
  reg.register_concept("<sks-object>", ConceptKind::Object);
  reg.register_concept("<sks-style>", ConceptKind::Style);
  CHECK(reg.render_training_prompt("sks-style", TemplateBank::Style, 0) == "a painting, art by <sks-style>");
  CHECK(reg.render_training_prompt("sks-object", TemplateBank::Object, 0) == "a photo of a <sks-object>");
  CHECK(reg.render_training_prompt("sks-object", TemplateBank::Object, 5) ==
        reg.render_training_prompt("sks-object", TemplateBank::Object, 5));
  CHECK(code_of([&] { reg.render_training_prompt("sks-object", TemplateBank::Object, 1000); }) ==
        ErrorCode::IndexOutOfRange);
  CHECK(code_of([&] { reg.render_training_prompt("nope", TemplateBank::Object, 0); }) == ErrorCode::UnknownConcept);
  CHECK(reg.render_pair_prompt("sks-object", "sks-style", 0) ==
        "a photo of a <sks-object> in the style of <sks-style> with a clear background.");
}

TEST_CASE("banks keep their placeholders") {
  for (const auto& t : template_bank(TemplateBank::Style)) CHECK(t.find("[name]") != std::string::npos);
  for (const auto& t : template_bank(TemplateBank::Object)) CHECK(t.find("[name]") != std::string::npos);
  for (const auto& t : template_bank(TemplateBank::Multi)) {
    CHECK(t.find("[name_object]") != std::string::npos);
    CHECK(t.find("[name_style]") != std::string::npos);
  }
  CHECK(template_bank(TemplateBank::Style).size() == 46);
  CHECK(template_bank(TemplateBank::Object).size() == 67);
  CHECK(template_bank(TemplateBank::Multi).size() == 27);
}

TEST_CASE("save and load round-trip every field") {
  Registry reg(12, 99);
  reg.register_concept("<sks-object>", ConceptKind::Object);
  reg.register_concept("<sks-style>", ConceptKind::Style);
  reg.register_concept("cat", ConceptKind::General);
  const auto path = temp_path("reg.json");
  save_registry(reg, path);
  const Registry back = load_registry(path);
  CHECK(back == reg);
  CHECK(back.seed() == reg.seed());
  CHECK(back.digest() == reg.digest());
}

TEST_CASE("load rejects bad files") {
  const auto path = temp_path("bad.json");
  write_text_file(path, R"({"schema_version":2,"n_bits":4,"records":[]})");
  CHECK(code_of([&] { load_registry(path); }) == ErrorCode::SchemaVersionMismatch);
  write_text_file(path, R"({"schema_version":1,"n_bits":2,"records":[
    {"concept_id":"a","token":"a","kind":"object","secret":[0,1],"query_template":"{}"},
    {"concept_id":"b","token":"b","kind":"object","secret":[0,1],"query_template":"{}"}]})");
  CHECK(code_of([&] { load_registry(path); }) == ErrorCode::IntegrityError);
  write_text_file(path, R"({"schema_version":1,"n_bits":2,"records":[
    {"concept_id":"a","token":"a","kind":"object","secret":[0,1],"query_template":"{}"},
    {"concept_id":"a","token":"a2","kind":"object","secret":[1,1],"query_template":"{}"}]})");
  CHECK(code_of([&] { load_registry(path); }) == ErrorCode::IntegrityError);
  write_text_file(path, "{not json");
  CHECK(code_of([&] { load_registry(path); }) == ErrorCode::ParseError);
  CHECK(code_of([] { load_registry("/nonexistent/dir/reg.json"); }) == ErrorCode::IoError);
}

TEST_CASE("multi-concept dataset parsing") {
  const auto ok = parse_multiconcept_dataset(
      R"([{"prompt":"a cat wearing a sweater sitting on a sunny beach","targets":["cat","sweater","sunny","beach"]}])");
  REQUIRE(ok.size() == 1);
  CHECK(ok[0].targets.size() == 4);
  CHECK(code_of([] { parse_multiconcept_dataset(R"([{"prompt":"a cat","targets":["dog"]}])"); }) ==
        ErrorCode::TargetNotInPrompt);
  CHECK(parse_multiconcept_dataset("[]").empty());
  CHECK(code_of([] { parse_multiconcept_dataset(R"({"prompt":"x"})"); }) == ErrorCode::ParseError);
  CHECK(code_of([] { parse_multiconcept_dataset(R"([{"prompt":"a cat"}])"); }) == ErrorCode::ParseError);
}

TEST_CASE("tokens and trailing punctuation count as mentions") {
  CHECK(prompt_mentions("a photo of <sks-object> here", "sks-object"));
  CHECK(prompt_mentions("a clear background.", "background"));
  CHECK_FALSE(prompt_mentions("a category", "cat"));
}

TEST_CASE("published listing: the first four entries validate, the fifth names a word absent from its prompt") {
  const std::string text = read_text_file(kData / "multiconcept_listing.json");
  CHECK(code_of([&] { parse_multiconcept_dataset(text); }) == ErrorCode::TargetNotInPrompt);
  auto j = nlohmann::json::parse(text);
  j.erase(4);
  const auto samples = parse_multiconcept_dataset(j.dump());
  CHECK(samples.size() == 4);
  const auto path = temp_path("ds.json");
  save_multiconcept_dataset(samples, path);
  CHECK(load_multiconcept_dataset(path) == samples);
}
