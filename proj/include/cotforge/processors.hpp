#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cotforge/gateway.hpp"
#include "cotforge/record.hpp"

namespace cotforge::processors {

// Plain-text template with {prompt}, {reasoning}, {answer} and {reference} placeholders.
// "{{" and "}}" produce literal braces; braces around anything that is not an identifier
// are kept verbatim.
class PromptTemplate {
 public:
  PromptTemplate() = default;
  PromptTemplate(std::string name, std::string text);

  const std::string& name() const { return name_; }
  const std::string& text() const { return text_; }
  // First 16 hex digits of the SHA-256 of the template text.
  const std::string& hash() const { return hash_; }

  std::string render(const Problem& problem, const CoTDraft* draft = nullptr) const;
  std::string render(const CoTRecord& record) const { return render(record.problem, &record.draft); }

 private:
  struct Piece {
    bool placeholder = false;
    std::string text;
  };
  std::string name_;
  std::string text_;
  std::string hash_;
  std::vector<Piece> pieces_;
};

struct JudgePromptSet {
  PromptTemplate generate;
  PromptTemplate difficulty;
  PromptTemplate rewrite;
  PromptTemplate verify;
  PromptTemplate rv;
  PromptTemplate cd;

  // Reads <dir>/{generate,difficulty,rewrite,verify,rv,cd}.txt.
  static JudgePromptSet load(const std::filesystem::path& dir);
};

enum class VerifyMethod { exact, numeric, judge };
std::string_view to_string(VerifyMethod m);

struct VerifyOutcome {
  Verification decision = Verification::unverified;
  VerifyMethod method = VerifyMethod::exact;
  std::string detail;
};

struct ProcessorOptions {
  int reask_budget = 2;
  double judge_temperature = 0.0;
  int judge_max_tokens = 1024;
  int generation_max_tokens = 16384;
  bool judge_verification = true;
  // Judge teacher for scoring and verification; empty means the generating teacher.
  std::string judge_teacher;
  // Rewriting teacher; empty means the generating teacher.
  std::string rewrite_teacher;
};

// Result of one processing step on one record.
struct Outcome {
  CoTRecord record;
  std::vector<std::string> warnings;
  int calls = 0;
};

struct VerifyResult {
  CoTRecord record;
  VerifyOutcome outcome;
  std::vector<std::string> warnings;
  int calls = 0;
};

struct GenerateResult {
  std::vector<CoTRecord> records;
  std::vector<std::string> warnings;
  int calls = 0;
  int skipped = 0;
  int transport_failures = 0;
};

// Returns the single vocabulary label present in the reply as a whole word
// (case-insensitive). Zero or several distinct labels yield nullopt.
std::optional<std::string> parse_judge_label(std::string_view text,
                                             std::span<const std::string> vocabulary);

std::string make_record_id(const std::string& problem_id, const std::string& teacher_id,
                           double temperature, int sample_index);

class Processors {
 public:
  Processors(gateway::GatewayPool& pool, JudgePromptSet prompts, ProcessorOptions options = {});

  const JudgePromptSet& prompts() const { return prompts_; }
  const ProcessorOptions& options() const { return options_; }

  // One draft per (teacher, temperature, sample). Failed combos are skipped with a warning.
  GenerateResult generate_cots(const Problem& problem, std::span<const std::string> teachers,
                               std::span<const double> temperatures, int per_combo);

  // Throws gateway::TransportError when the judge is unreachable.
  Outcome score_difficulty(CoTRecord record);
  // One pass; a judge failure returns the record unchanged with a warning.
  Outcome rewrite_cot(CoTRecord record);
  VerifyResult verify_cot(CoTRecord record);
  Outcome score_rv(CoTRecord record);
  Outcome score_cd(CoTRecord record);

 private:
  struct JudgeReply {
    std::optional<std::string> label;
    std::string last_reply;
    int calls = 0;
  };
  JudgeReply ask_label(const std::string& teacher, const std::string& prompt,
                       std::span<const std::string> vocabulary, const std::string& reask);
  Outcome score_scale(CoTRecord record, bool rv);
  std::string judge_for(const CoTRecord& record) const;

  gateway::GatewayPool& pool_;
  JudgePromptSet prompts_;
  ProcessorOptions options_;
};

}  // namespace cotforge::processors
