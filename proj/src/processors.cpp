#include "cotforge/processors.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <set>

#include "cotforge/answer.hpp"
#include "cotforge/io.hpp"

namespace cotforge::processors {

using gateway::ChatMessage;
using gateway::ChatRequest;
using gateway::TransportError;

namespace {

const std::set<std::string>& known_placeholders() {
  static const std::set<std::string> names{"prompt", "reasoning", "answer", "reference"};
  return names;
}

bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '_'; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string strip_think(std::string_view reply) {
  std::string out(reply);
  for (;;) {
    auto close = out.find("</think>");
    if (close == std::string::npos) break;
    auto open = out.rfind("<think>", close);
    std::size_t begin = open == std::string::npos ? 0 : open;
    out.erase(begin, close + 8 - begin);
  }
  auto first = out.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  auto last = out.find_last_not_of(" \t\r\n");
  return out.substr(first, last - first + 1);
}

const std::vector<std::string>& difficulty_vocabulary() {
  static const std::vector<std::string> v{"easy", "medium", "hard"};
  return v;
}

const std::vector<std::string>& grade_vocabulary() {
  static const std::vector<std::string> v{"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"};
  return v;
}

const std::vector<std::string>& verdict_vocabulary() {
  static const std::vector<std::string> v{"correct", "incorrect"};
  return v;
}

std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

PromptTemplate::PromptTemplate(std::string name, std::string text)
    : name_(std::move(name)), text_(std::move(text)), hash_(sha256_hex(text_).substr(0, 16)) {
  std::string literal;
  auto flush = [&] {
    if (!literal.empty()) pieces_.push_back({false, std::move(literal)});
    literal.clear();
  };
  for (std::size_t i = 0; i < text_.size(); ++i) {
    const char c = text_[i];
    if ((c == '{' || c == '}') && i + 1 < text_.size() && text_[i + 1] == c) {
      literal.push_back(c);
      ++i;
      continue;
    }
    if (c == '{') {
      auto close = text_.find('}', i + 1);
      if (close != std::string::npos) {
        std::string_view name_view(text_.data() + i + 1, close - i - 1);
        const bool identifier =
            !name_view.empty() && std::all_of(name_view.begin(), name_view.end(), [](char ch) {
              return std::islower(static_cast<unsigned char>(ch)) || ch == '_';
            });
        if (identifier) {
          std::string placeholder(name_view);
          if (!known_placeholders().count(placeholder)) {
            throw std::invalid_argument("template \"" + name_ + "\": unknown placeholder {" +
                                        placeholder + "}");
          }
          flush();
          pieces_.push_back({true, std::move(placeholder)});
          i = close;
          continue;
        }
      }
    }
    literal.push_back(c);
  }
  flush();
}

std::string PromptTemplate::render(const Problem& problem, const CoTDraft* draft) const {
  std::string out;
  for (const auto& piece : pieces_) {
    if (!piece.placeholder) {
      out += piece.text;
    } else if (piece.text == "prompt") {
      out += problem.prompt;
    } else if (piece.text == "reference") {
      out += problem.reference_answer.value_or("(no reference answer)");
    } else if (!draft) {
      throw ContractError("template \"" + name_ + "\" needs a CoT draft for {" + piece.text + "}");
    } else if (piece.text == "reasoning") {
      out += draft->reasoning_text;
    } else {
      out += draft->final_answer;
    }
  }
  return out;
}

JudgePromptSet JudgePromptSet::load(const std::filesystem::path& dir) {
  auto read = [&](const char* name) {
    return PromptTemplate(name, read_file(dir / (std::string(name) + ".txt")));
  };
  return {read("generate"), read("difficulty"), read("rewrite"),
          read("verify"),   read("rv"),         read("cd")};
}

std::string_view to_string(VerifyMethod m) {
  switch (m) {
    case VerifyMethod::exact: return "exact";
    case VerifyMethod::numeric: return "numeric";
    case VerifyMethod::judge: return "judge";
  }
  return "exact";
}

std::optional<std::string> parse_judge_label(std::string_view text,
                                             std::span<const std::string> vocabulary) {
  if (vocabulary.empty()) throw ContractError("parse_judge_label requires a non-empty vocabulary");
  const std::string hay = lower(text);
  std::optional<std::string> found;
  for (const auto& label : vocabulary) {
    const std::string needle = lower(label);
    if (needle.empty()) continue;
    bool present = false;
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
      const bool left_ok = pos == 0 || !is_word_char(hay[pos - 1]);
      const std::size_t end = pos + needle.size();
      const bool right_ok = end == hay.size() || !is_word_char(hay[end]);
      if (left_ok && right_ok) {
        present = true;
        break;
      }
    }
    if (!present) continue;
    if (found) return std::nullopt;
    found = label;
  }
  return found;
}

std::string make_record_id(const std::string& problem_id, const std::string& teacher_id,
                           double temperature, int sample_index) {
  return problem_id + "/" + teacher_id + "/t" + format_number(temperature) + "/" +
         std::to_string(sample_index);
}

Processors::Processors(gateway::GatewayPool& pool, JudgePromptSet prompts,
                       ProcessorOptions options)
    : pool_(pool), prompts_(std::move(prompts)), options_(std::move(options)) {
  if (options_.reask_budget < 0) throw std::invalid_argument("reask_budget must be >= 0");
}

std::string Processors::judge_for(const CoTRecord& record) const {
  return options_.judge_teacher.empty() ? record.draft.teacher_id : options_.judge_teacher;
}

Processors::JudgeReply Processors::ask_label(const std::string& teacher, const std::string& prompt,
                                             std::span<const std::string> vocabulary,
                                             const std::string& reask) {
  JudgeReply out;
  ChatRequest req;
  req.teacher_id = teacher;
  req.temperature = options_.judge_temperature;
  req.max_output_tokens = options_.judge_max_tokens;
  req.messages.push_back({"user", prompt});
  for (int round = 0; round <= options_.reask_budget; ++round) {
    auto reply = pool_.submit_chat(req);
    ++out.calls;
    out.last_reply = reply.content;
    // Judges that think aloud are graded on their final output only.
    out.label = parse_judge_label(strip_think(reply.content), vocabulary);
    if (out.label) return out;
    req.messages.push_back({"assistant", reply.content});
    req.messages.push_back({"user", reask});
  }
  return out;
}

GenerateResult Processors::generate_cots(const Problem& problem,
                                         std::span<const std::string> teachers,
                                         std::span<const double> temperatures, int per_combo) {
  if (teachers.empty()) throw ContractError("generate_cots requires at least one teacher");
  if (temperatures.empty()) throw ContractError("generate_cots requires at least one temperature");
  if (per_combo < 1) throw ContractError("generate_cots requires per_combo >= 1");
  for (const auto& t : teachers) {
    if (!pool_.has_teacher(t)) throw gateway::ConfigurationError("unknown teacher_id \"" + t + "\"");
  }

  GenerateResult out;
  const std::string prompt = prompts_.generate.render(problem);
  for (const auto& teacher : teachers) {
    for (double temperature : temperatures) {
      for (int k = 0; k < per_combo; ++k) {
        const std::string id = make_record_id(problem.id, teacher, temperature, k);
        ChatRequest req;
        req.teacher_id = teacher;
        req.temperature = temperature;
        req.max_output_tokens = options_.generation_max_tokens;
        req.messages.push_back({"user", prompt});
        std::string reply;
        try {
          ++out.calls;
          reply = pool_.submit_chat(req).content;
        } catch (const TransportError& e) {
          out.warnings.push_back(id + ": generation failed: " + e.what());
          ++out.skipped;
          ++out.transport_failures;
          continue;
        }
        auto parts = split_teacher_output(reply);
        CoTRecord r;
        r.id = id;
        r.problem = problem;
        r.draft.problem_id = problem.id;
        r.draft.teacher_id = teacher;
        r.draft.temperature = temperature;
        r.draft.reasoning_text = std::move(parts.reasoning);
        r.draft.final_answer = std::move(parts.final_answer);
        r.draft.token_count = count_tokens(r.draft.reasoning_text);
        r.lineage.emplace_back(stage_names::generated);
        r.template_hashes["generate"] = prompts_.generate.hash();
        if (auto violations = validate_record(r); !violations.empty()) {
          out.warnings.push_back(id + ": generation rejected: " +
                                 ValidationError(std::move(violations)).what());
          ++out.skipped;
          continue;
        }
        out.records.push_back(std::move(r));
      }
    }
  }
  if (out.records.empty()) {
    out.warnings.push_back(problem.id + ": no successful generations");
  }
  return out;
}

Outcome Processors::score_difficulty(CoTRecord record) {
  if (!record.has_stage(stage_names::generated)) {
    throw ContractError(record.id + ": score_difficulty requires a generated record");
  }
  Outcome out;
  if (record.annotations.difficulty && record.has_stage(stage_names::difficulty_scored)) {
    out.record = std::move(record);
    return out;
  }
  auto reply = ask_label(judge_for(record), prompts_.difficulty.render(record),
                         difficulty_vocabulary(),
                         "Reply with exactly one word: easy, medium, or hard.");
  out.calls = reply.calls;
  if (reply.label) {
    record.annotations.difficulty = parse_difficulty(*reply.label);
  } else {
    record.annotations.difficulty = Difficulty::medium;
    out.warnings.push_back(record.id + ": unparsable difficulty reply \"" +
                           reply.last_reply.substr(0, 80) + "\"; defaulted to medium");
  }
  record.lineage.emplace_back(stage_names::difficulty_scored);
  record.template_hashes["difficulty"] = prompts_.difficulty.hash();
  out.record = std::move(record);
  return out;
}

Outcome Processors::rewrite_cot(CoTRecord record) {
  const auto& diff = record.annotations.difficulty;
  if (!diff || *diff == Difficulty::medium) {
    throw ContractError(record.id + ": rewrite_cot requires difficulty easy or hard");
  }
  Outcome out;
  if (record.has_stage(stage_names::rewritten)) {
    out.record = std::move(record);
    return out;
  }
  ChatRequest req;
  req.teacher_id = options_.rewrite_teacher.empty() ? record.draft.teacher_id
                                                    : options_.rewrite_teacher;
  req.temperature = options_.judge_temperature;
  req.max_output_tokens = options_.generation_max_tokens;
  req.messages.push_back({"user", prompts_.rewrite.render(record)});
  std::string text;
  try {
    ++out.calls;
    text = strip_think(pool_.submit_chat(req).content);
  } catch (const TransportError& e) {
    out.warnings.push_back(record.id + ": rewrite failed, keeping original: " + e.what());
    out.record = std::move(record);
    return out;
  }
  if (text.empty()) {
    out.warnings.push_back(record.id + ": rewrite returned empty text, keeping original");
    out.record = std::move(record);
    return out;
  }
  record.draft.reasoning_text = std::move(text);
  record.draft.token_count = count_tokens(record.draft.reasoning_text);
  record.annotations.rewritten = true;
  record.lineage.emplace_back(stage_names::rewritten);
  record.template_hashes["rewrite"] = prompts_.rewrite.hash();
  out.record = std::move(record);
  return out;
}

VerifyResult Processors::verify_cot(CoTRecord record) {
  VerifyResult out;
  const auto& reference = record.problem.reference_answer;
  auto decide = [&](Verification decision, VerifyMethod method, std::string detail) {
    out.outcome = {decision, method, std::move(detail)};
    record.annotations.verified = decision;
    if (!record.has_stage(stage_names::verified)) record.lineage.emplace_back(stage_names::verified);
  };

  if (reference) {
    const std::string answer = normalize_answer(record.draft.final_answer);
    const std::string expected = normalize_answer(*reference);
    if (!answer.empty() && answer == expected) {
      decide(Verification::kept, VerifyMethod::exact, "normalized answers match");
      out.record = std::move(record);
      return out;
    }
    const auto a = parse_numeric_answer(record.draft.final_answer);
    const auto b = parse_numeric_answer(*reference);
    if (a && b) {
      if (numerically_equal(*a, *b)) {
        decide(Verification::kept, VerifyMethod::numeric, "numerically equal");
      } else {
        decide(Verification::discarded, VerifyMethod::numeric,
               "numeric mismatch: " + format_number(*a) + " vs " + format_number(*b));
      }
      out.record = std::move(record);
      return out;
    }
  }

  if (!options_.judge_verification) {
    if (reference) {
      decide(Verification::discarded, VerifyMethod::exact,
             "answer \"" + record.draft.final_answer + "\" does not match reference");
    } else {
      out.warnings.push_back(record.id + ": no reference answer and judge disabled; left unverified");
    }
    out.record = std::move(record);
    return out;
  }

  auto reply = ask_label(judge_for(record), prompts_.verify.render(record), verdict_vocabulary(),
                         "Reply with exactly one word: correct or incorrect.");
  out.calls = reply.calls;
  record.template_hashes["verify"] = prompts_.verify.hash();
  if (reply.label == "correct") {
    decide(Verification::kept, VerifyMethod::judge, "judge: correct");
  } else if (reply.label == "incorrect") {
    decide(Verification::discarded, VerifyMethod::judge, "judge: incorrect");
  } else {
    decide(Verification::discarded, VerifyMethod::judge, "judge verdict unparsable");
    out.warnings.push_back(record.id + ": unparsable verification verdict; discarded");
  }
  out.record = std::move(record);
  return out;
}

Outcome Processors::score_scale(CoTRecord record, bool rv) {
  if (record.annotations.verified != Verification::kept) {
    throw ContractError(record.id + ": " + (rv ? "score_rv" : "score_cd") +
                        " requires a kept record");
  }
  auto& score = rv ? record.annotations.rv : record.annotations.cd;
  const auto& other = rv ? record.annotations.cd : record.annotations.rv;
  Outcome out;
  if (score) {
    out.record = std::move(record);
    return out;
  }
  const PromptTemplate& tmpl = rv ? prompts_.rv : prompts_.cd;
  auto reply = ask_label(judge_for(record), tmpl.render(record), grade_vocabulary(),
                         "Reply with a single integer from 0 to 9.");
  out.calls = reply.calls;
  record.template_hashes[rv ? "rv" : "cd"] = tmpl.hash();
  if (!reply.label) {
    record.annotations.quarantined = true;
    out.warnings.push_back(record.id + ": unparsable " + (rv ? "RV" : "CD") + " grade \"" +
                           reply.last_reply.substr(0, 80) + "\"; quarantined");
    out.record = std::move(record);
    return out;
  }
  score = static_cast<double>(std::stoi(*reply.label)) / 9.0;
  if (other) record.annotations.quarantined = false;
  record.lineage.emplace_back(rv ? stage_names::rv_scored : stage_names::cd_scored);
  out.record = std::move(record);
  return out;
}

Outcome Processors::score_rv(CoTRecord record) { return score_scale(std::move(record), true); }
Outcome Processors::score_cd(CoTRecord record) { return score_scale(std::move(record), false); }

}  // namespace cotforge::processors
