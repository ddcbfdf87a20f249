#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cotforge/errors.hpp"

namespace cotforge {

enum class TaskDomain { math, code, science, other };
enum class Difficulty { easy, medium, hard };
enum class Verification { unverified, kept, discarded };

std::string_view to_string(TaskDomain d);
std::string_view to_string(Difficulty d);
std::string_view to_string(Verification v);
std::optional<TaskDomain> parse_task_domain(std::string_view s);
std::optional<Difficulty> parse_difficulty(std::string_view s);
std::optional<Verification> parse_verification(std::string_view s);

// Closed vocabulary of lineage stage names.
namespace stage_names {
inline constexpr std::string_view generated = "generated";
inline constexpr std::string_view difficulty_scored = "difficulty_scored";
inline constexpr std::string_view rewritten = "rewritten";
inline constexpr std::string_view verified = "verified";
inline constexpr std::string_view rv_scored = "rv_scored";
inline constexpr std::string_view cd_scored = "cd_scored";
inline constexpr std::string_view sampled = "sampled";
}  // namespace stage_names

bool is_lineage_stage(std::string_view name);

struct Problem {
  std::string id;
  TaskDomain task_domain = TaskDomain::other;
  std::string prompt;
  std::optional<std::string> reference_answer;
  std::string source;

  bool operator==(const Problem&) const = default;
};

struct CoTDraft {
  std::string problem_id;
  std::string teacher_id;
  double temperature = 0.0;
  std::string reasoning_text;
  std::string final_answer;
  long long token_count = 0;

  bool operator==(const CoTDraft&) const = default;
};

struct Annotations {
  std::optional<Difficulty> difficulty;
  std::optional<double> rv;
  std::optional<double> cd;
  Verification verified = Verification::unverified;
  bool rewritten = false;
  // Set when a score could not be obtained; excluded from sampling until rescored.
  bool quarantined = false;

  bool operator==(const Annotations&) const = default;
};

struct CoTRecord {
  std::string id;
  Problem problem;
  CoTDraft draft;
  Annotations annotations;
  std::vector<std::string> lineage;
  // stage name -> prompt template content hash
  std::map<std::string, std::string> template_hashes;

  bool has_stage(std::string_view stage) const;
  bool operator==(const CoTRecord&) const = default;
};

struct ScoreWindow {
  double low = 0.0;
  double high = 1.0;

  bool contains(double v) const { return v >= low && v <= high; }
  bool operator==(const ScoreWindow&) const = default;
};

struct StudentProfile {
  std::string name;
  ScoreWindow cd_window;
  ScoreWindow rv_window;
  long long target_size = 1;
};

struct Violation {
  std::string field;
  std::string rule;

  std::string message() const { return field + " " + rule; }
  bool operator==(const Violation&) const = default;
};

// Raised for malformed JSON; offset is the byte position reported by the parser.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<Violation> violations);
  const std::vector<Violation>& violations() const noexcept { return violations_; }

 private:
  std::vector<Violation> violations_;
};

// Whitespace-delimited token count.
long long count_tokens(std::string_view text);

std::vector<Violation> validate_problem(const Problem& p);
std::vector<Violation> validate_record(const CoTRecord& r);
std::vector<Violation> validate_profile(const StudentProfile& p);

CoTRecord parse_record(std::string_view line);
std::string serialize_record(const CoTRecord& r);

Problem parse_problem(std::string_view line);
std::string serialize_problem(const Problem& p);

// Reads a problems JSONL file; rejects duplicate ids.
std::vector<Problem> read_problems(const std::string& path);
std::vector<CoTRecord> read_records(const std::string& path);
void write_records(const std::string& path, const std::vector<CoTRecord>& records);

}  // namespace cotforge
