#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "cotforge/mock_server.hpp"
#include "cotforge/record.hpp"

namespace testing {

namespace fs = std::filesystem;

inline fs::path source_dir() { return COTFORGE_SOURCE_DIR; }
inline fs::path prompts_dir() { return source_dir() / "prompts" / "v1"; }

// Fresh directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::mt19937_64 rng{std::random_device{}()};
    path_ = fs::temp_directory_path() / ("cotforge-test-" + std::to_string(rng()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& p) const { return path_ / p; }

 private:
  fs::path path_;
};

inline std::unique_ptr<cotforge::mock::MockTeacherServer> start_mock(const nlohmann::json& scenario,
                                                                     int threads = 16) {
  auto server = std::make_unique<cotforge::mock::MockTeacherServer>(
      cotforge::mock::Scenario::from_json(scenario), threads);
  server->start();
  return server;
}

inline cotforge::Problem make_problem(const std::string& id, std::optional<std::string> reference = "4",
                                      cotforge::TaskDomain domain = cotforge::TaskDomain::math) {
  cotforge::Problem p;
  p.id = id;
  p.task_domain = domain;
  p.prompt = "[" + id + "] What is 2 + 2?";
  p.reference_answer = std::move(reference);
  p.source = "unit";
  return p;
}

inline cotforge::CoTRecord make_record(const std::string& id, cotforge::TaskDomain domain =
                                                                  cotforge::TaskDomain::math) {
  cotforge::CoTRecord r;
  r.id = id;
  r.problem = make_problem(id.substr(0, id.find('/')), "4", domain);
  r.draft.problem_id = r.problem.id;
  r.draft.teacher_id = "alpha";
  r.draft.temperature = 0.6;
  r.draft.reasoning_text = "two plus two is four";
  r.draft.final_answer = "4";
  r.draft.token_count = 5;
  r.lineage = {"generated"};
  return r;
}

// A kept, scored record ready for sampling.
inline cotforge::CoTRecord scored_record(const std::string& id, double rv, double cd,
                                         cotforge::Difficulty d = cotforge::Difficulty::medium,
                                         cotforge::TaskDomain domain = cotforge::TaskDomain::math) {
  auto r = make_record(id, domain);
  r.annotations.difficulty = d;
  r.annotations.verified = cotforge::Verification::kept;
  r.annotations.rv = rv;
  r.annotations.cd = cd;
  r.lineage = {"generated", "difficulty_scored", "verified", "rv_scored", "cd_scored"};
  return r;
}

}  // namespace testing
