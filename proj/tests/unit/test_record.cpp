#include <doctest.h>

#include <fstream>
#include <random>

#include "cotforge/io.hpp"
#include "cotforge/record.hpp"
#include "cotforge/record_json.hpp"
#include "helpers.hpp"

using namespace cotforge;
using nlohmann::json;

namespace {

std::vector<std::string> violation_messages(const CoTRecord& r) {
  std::vector<std::string> out;
  for (const auto& v : validate_record(r)) out.push_back(v.message());
  return out;
}

CoTRecord random_record(std::mt19937_64& rng, int i) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, 9);
  auto r = testing::make_record("q" + std::to_string(i) + "/t/x/" + std::to_string(i),
                                static_cast<TaskDomain>(pick(rng) % 4));
  std::string text;
  const int words = 1 + pick(rng);
  for (int w = 0; w < words; ++w) text += (w ? (pick(rng) % 2 ? " " : "\n\t") : "") + std::string("w") + std::to_string(pick(rng));
  r.draft.reasoning_text = text + " été";
  r.draft.token_count = count_tokens(r.draft.reasoning_text);
  r.draft.temperature = unit(rng) * 2;
  if (pick(rng) < 5) r.problem.reference_answer.reset();
  if (pick(rng) < 7) r.annotations.difficulty = static_cast<Difficulty>(pick(rng) % 3);
  if (pick(rng) < 7) r.annotations.rv = unit(rng);
  if (pick(rng) < 7) r.annotations.cd = pick(rng) / 9.0;
  r.annotations.verified = static_cast<Verification>(pick(rng) % 3);
  if (pick(rng) < 3) {
    r.annotations.rewritten = true;
    r.lineage.push_back("rewritten");
  }
  if (pick(rng) < 4) r.template_hashes["generate"] = "abc";
  return r;
}

}  // namespace

TEST_CASE("enum names round-trip") {
  for (auto d : {TaskDomain::math, TaskDomain::code, TaskDomain::science, TaskDomain::other}) {
    CHECK(parse_task_domain(to_string(d)) == d);
  }
  for (auto d : {Difficulty::easy, Difficulty::medium, Difficulty::hard}) {
    CHECK(parse_difficulty(to_string(d)) == d);
  }
  CHECK_FALSE(parse_task_domain("Math"));
  CHECK_FALSE(parse_difficulty("HARD"));
  CHECK(parse_verification("discarded") == Verification::discarded);
}

TEST_CASE("token count is whitespace-delimited") {
  CHECK(count_tokens("") == 0);
  CHECK(count_tokens("   ") == 0);
  CHECK(count_tokens("a") == 1);
  CHECK(count_tokens(" a  b\tc\nd ") == 4);
  CHECK(count_tokens("x+y=z, so z-y=x.") == 3);
}

TEST_CASE("valid record has no violations") {
  CHECK(validate_record(testing::make_record("p1/alpha/t0.6/0")).empty());
}

TEST_CASE("score bounds") {
  auto r = testing::make_record("p1/a/t0/0");
  r.annotations.cd = -0.1;
  CHECK(violation_messages(r) == std::vector<std::string>{"cd out of [0,1]"});
  r.annotations.cd = 1.0;
  r.annotations.rv = 1.3;
  CHECK(violation_messages(r) == std::vector<std::string>{"rv out of [0,1]"});
  r.annotations.rv = std::nan("");
  CHECK(violation_messages(r) == std::vector<std::string>{"rv out of [0,1]"});
}

TEST_CASE("record invariants") {
  auto r = testing::make_record("p1/a/t0/0");
  SUBCASE("lineage must start with generated") {
    r.lineage = {"verified"};
    CHECK_FALSE(validate_record(r).empty());
  }
  SUBCASE("lineage vocabulary is closed") {
    r.lineage.push_back("polished");
    CHECK(violation_messages(r).at(0).find("unknown stage") != std::string::npos);
  }
  SUBCASE("rewritten needs lineage entry") {
    r.annotations.rewritten = true;
    CHECK(violation_messages(r) ==
          std::vector<std::string>{"rewritten requires \"rewritten\" in lineage"});
  }
  SUBCASE("token count must match text") {
    r.draft.token_count = 4;
    CHECK(violation_messages(r).size() == 1);
  }
  SUBCASE("empty reasoning") {
    r.draft.reasoning_text.clear();
    r.draft.token_count = 0;
    CHECK_FALSE(validate_record(r).empty());
  }
  SUBCASE("problem id mismatch") {
    r.draft.problem_id = "other";
    CHECK_FALSE(validate_record(r).empty());
  }
  SUBCASE("negative temperature") {
    r.draft.temperature = -0.1;
    CHECK_FALSE(validate_record(r).empty());
  }
}

TEST_CASE("profile windows") {
  StudentProfile p{"s", {0.2, 0.7}, {0.0, 1.0}, 10};
  CHECK(validate_profile(p).empty());
  p.cd_window = {0.8, 0.7};
  CHECK_FALSE(validate_profile(p).empty());
  p.cd_window = {0.0, 1.1};
  CHECK_FALSE(validate_profile(p).empty());
  p.cd_window = {0.0, 1.0};
  p.target_size = 0;
  CHECK_FALSE(validate_profile(p).empty());
}

TEST_CASE("parse_record maps fields and reports errors") {
  auto r = testing::make_record("p1/a/t0/0");
  r.annotations.rv = 0.5;
  const std::string line = serialize_record(r);
  CHECK(parse_record(line).annotations.rv == 0.5);

  SUBCASE("malformed JSON names the byte offset") {
    try {
      parse_record(R"({"id": "x",, })");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 12);
      CHECK(std::string(e.what()).find("byte 12") != std::string::npos);
    }
  }
  SUBCASE("validation error names the field") {
    auto j = json::parse(line);
    j["annotations"]["rv"] = 1.3;
    try {
      parse_record(j.dump());
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      REQUIRE(e.violations().size() == 1);
      CHECK(e.violations()[0].message() == "rv out of [0,1]");
    }
  }
  SUBCASE("unknown keys are rejected") {
    auto j = json::parse(line);
    j["annotations"]["score"] = 1;
    CHECK_THROWS_AS(parse_record(j.dump()), ValidationError);
  }
  SUBCASE("null is not accepted for optional fields") {
    auto j = json::parse(line);
    j["annotations"]["cd"] = nullptr;
    CHECK_THROWS_AS(parse_record(j.dump()), ValidationError);
  }
  SUBCASE("bad enum value") {
    auto j = json::parse(line);
    j["annotations"]["difficulty"] = "brutal";
    CHECK_THROWS_AS(parse_record(j.dump()), ValidationError);
  }
}

TEST_CASE("serialization is canonical") {
  auto r = testing::make_record("p1/a/t0/0");
  const std::string line = serialize_record(r);
  CHECK(line.find('\n') == std::string::npos);
  CHECK(line.find("null") == std::string::npos);
  CHECK(line.find("\"rv\"") == std::string::npos);
  CHECK(line.find("reference_answer") != std::string::npos);
  CHECK(line.find("quarantined") == std::string::npos);
  CHECK(serialize_record(testing::make_record("p1/a/t0/0")) == line);
  // keys appear in alphabetical order at the top level
  CHECK(line.find("\"annotations\"") < line.find("\"draft\""));
  CHECK(line.find("\"draft\"") < line.find("\"id\""));
  CHECK(line.find("\"lineage\"") < line.find("\"problem\""));
}

TEST_CASE("randomized round-trip") {
  std::mt19937_64 rng(42);
  for (int i = 0; i < 500; ++i) {
    auto r = random_record(rng, i);
    REQUIRE(validate_record(r).empty());
    const auto line = serialize_record(r);
    const auto back = parse_record(line);
    CHECK(back == r);
    CHECK(serialize_record(back) == line);
  }
}

TEST_CASE("golden fixture round-trips to the canonical form") {
  const auto dir = testing::source_dir() / "tests" / "fixtures";
  const auto loose = split_lines(read_file(dir / "records.jsonl"));
  const auto canonical = split_lines(read_file(dir / "records.canonical.jsonl"));
  REQUIRE(loose.size() == 50);
  REQUIRE(canonical.size() == 50);
  for (std::size_t i = 0; i < loose.size(); ++i) {
    CHECK(serialize_record(parse_record(loose[i])) == canonical[i]);
  }
}

TEST_CASE("problem files") {
  testing::TempDir tmp;
  const auto path = tmp / "p.jsonl";
  write_file_atomic(path, serialize_problem(testing::make_problem("a")) + "\n\n" +
                              serialize_problem(testing::make_problem("b", std::nullopt)) + "\n");
  auto ps = read_problems(path.string());
  REQUIRE(ps.size() == 2);
  CHECK_FALSE(ps[1].reference_answer);
  CHECK(serialize_problem(ps[1]).find("reference_answer") == std::string::npos);

  write_file_atomic(path, serialize_problem(testing::make_problem("a")) + "\n" +
                              serialize_problem(testing::make_problem("a")) + "\n");
  CHECK_THROWS_AS(read_problems(path.string()), ValidationError);

  write_file_atomic(path, R"({"id":"x","prompt":"p","source":"s","task_domain":"art"})" "\n");
  CHECK_THROWS_AS(read_problems(path.string()), ValidationError);
}

TEST_CASE("record files are written atomically and read back") {
  testing::TempDir tmp;
  const auto path = tmp / "r.jsonl";
  std::vector<CoTRecord> rs{testing::make_record("a/x/t0/0"), testing::make_record("b/x/t0/0")};
  write_records(path.string(), rs);
  CHECK(read_records(path.string()) == rs);
  for (const auto& e : std::filesystem::directory_iterator(tmp.path())) {
    CHECK(e.path().filename() == "r.jsonl");
  }
  std::ofstream(path, std::ios::app) << "{broken\n";
  try {
    read_records(path.string());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
}

TEST_CASE("shard names and input expansion") {
  CHECK(shard_file_name("verify", 3) == "verify.00003.jsonl");
  CHECK(is_shard_file_name("verify.00003.jsonl"));
  CHECK_FALSE(is_shard_file_name("verify.rejects.jsonl"));
  CHECK_FALSE(is_shard_file_name("verify.journal.jsonl"));
  testing::TempDir tmp;
  write_file_atomic(tmp / "cd.00001.jsonl", "");
  write_file_atomic(tmp / "cd.00000.jsonl", "");
  write_file_atomic(tmp / "cd.rejects.jsonl", "");
  auto files = expand_inputs(tmp.path());
  REQUIRE(files.size() == 2);
  CHECK(files[0].filename() == "cd.00000.jsonl");
  CHECK(expand_inputs(tmp / "cd.rejects.jsonl").size() == 1);
}

TEST_CASE("sha256") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
