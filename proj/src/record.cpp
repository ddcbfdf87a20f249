#include "cotforge/record.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <set>

#include "cotforge/io.hpp"
#include "cotforge/record_json.hpp"

namespace cotforge {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 4> kDomainNames{"math", "code", "science", "other"};
constexpr std::array<std::string_view, 3> kDifficultyNames{"easy", "medium", "hard"};
constexpr std::array<std::string_view, 3> kVerificationNames{"unverified", "kept", "discarded"};
constexpr std::array<std::string_view, 7> kLineageStages{
    stage_names::generated, stage_names::difficulty_scored, stage_names::rewritten,
    stage_names::verified,  stage_names::rv_scored,         stage_names::cd_scored,
    stage_names::sampled};

template <typename Enum, std::size_t N>
std::optional<Enum> lookup(const std::array<std::string_view, N>& names, std::string_view s) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return static_cast<Enum>(i);
  }
  return std::nullopt;
}

[[noreturn]] void fail(const std::string& field, const std::string& rule) {
  throw ValidationError({Violation{field, rule}});
}

// Strict object reader: every key must be consumed, types are checked per field.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "record" : path_, "must be an object");
  }

  const json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  const json& require(const std::string& key) {
    const json* v = find(key);
    if (!v) fail(qualify(key), "is required");
    return *v;
  }

  std::string string(const std::string& key) {
    const json& v = require(key);
    if (!v.is_string()) fail(qualify(key), "must be a string");
    return v.get<std::string>();
  }

  std::optional<std::string> opt_string(const std::string& key) {
    const json* v = find(key);
    if (!v) return std::nullopt;
    if (!v->is_string()) fail(qualify(key), "must be a string");
    return v->get<std::string>();
  }

  double number(const std::string& key) {
    const json& v = require(key);
    if (!v.is_number()) fail(qualify(key), "must be a number");
    return v.get<double>();
  }

  std::optional<double> opt_number(const std::string& key) {
    const json* v = find(key);
    if (!v) return std::nullopt;
    if (!v->is_number()) fail(qualify(key), "must be a number");
    return v->get<double>();
  }

  long long integer(const std::string& key) {
    const json& v = require(key);
    if (!v.is_number_integer()) fail(qualify(key), "must be an integer");
    return v.get<long long>();
  }

  bool boolean(const std::string& key, std::optional<bool> fallback = std::nullopt) {
    const json* v = find(key);
    if (!v) {
      if (fallback) return *fallback;
      fail(qualify(key), "is required");
    }
    if (!v->is_boolean()) fail(qualify(key), "must be a boolean");
    return v->get<bool>();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(qualify(it.key()), "is not a known field");
    }
  }

  std::string qualify(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

bool in_unit_interval(double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; }

}  // namespace

std::string_view to_string(TaskDomain d) { return kDomainNames[static_cast<std::size_t>(d)]; }
std::string_view to_string(Difficulty d) { return kDifficultyNames[static_cast<std::size_t>(d)]; }
std::string_view to_string(Verification v) {
  return kVerificationNames[static_cast<std::size_t>(v)];
}
std::optional<TaskDomain> parse_task_domain(std::string_view s) {
  return lookup<TaskDomain>(kDomainNames, s);
}
std::optional<Difficulty> parse_difficulty(std::string_view s) {
  return lookup<Difficulty>(kDifficultyNames, s);
}
std::optional<Verification> parse_verification(std::string_view s) {
  return lookup<Verification>(kVerificationNames, s);
}

bool is_lineage_stage(std::string_view name) {
  return std::find(kLineageStages.begin(), kLineageStages.end(), name) != kLineageStages.end();
}

bool CoTRecord::has_stage(std::string_view stage) const {
  return std::find(lineage.begin(), lineage.end(), stage) != lineage.end();
}

ValidationError::ValidationError(std::vector<Violation> violations)
    : std::runtime_error([&] {
        std::string msg;
        for (const auto& v : violations) {
          if (!msg.empty()) msg += "; ";
          msg += v.message();
        }
        return msg;
      }()),
      violations_(std::move(violations)) {}

long long count_tokens(std::string_view text) {
  long long n = 0;
  bool in_token = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      in_token = false;
    } else if (!in_token) {
      in_token = true;
      ++n;
    }
  }
  return n;
}

std::vector<Violation> validate_problem(const Problem& p) {
  std::vector<Violation> out;
  if (p.id.empty()) out.push_back({"id", "must be non-empty"});
  if (static_cast<std::size_t>(p.task_domain) >= kDomainNames.size()) {
    out.push_back({"task_domain", "must be one of math, code, science, other"});
  }
  return out;
}

std::vector<Violation> validate_record(const CoTRecord& r) {
  std::vector<Violation> out;
  if (r.id.empty()) out.push_back({"id", "must be non-empty"});
  for (auto v : validate_problem(r.problem)) {
    v.field = "problem." + v.field;
    out.push_back(std::move(v));
  }
  const auto& d = r.draft;
  if (d.problem_id != r.problem.id) out.push_back({"problem_id", "must equal problem.id"});
  if (d.teacher_id.empty()) out.push_back({"teacher_id", "must be non-empty"});
  if (!std::isfinite(d.temperature) || d.temperature < 0.0) {
    out.push_back({"temperature", "must be a finite real >= 0"});
  }
  if (d.reasoning_text.empty()) out.push_back({"reasoning_text", "must be non-empty"});
  if (d.token_count < 0) {
    out.push_back({"token_count", "must be >= 0"});
  } else if (d.token_count != count_tokens(d.reasoning_text)) {
    out.push_back({"token_count", "does not match whitespace token count of reasoning_text"});
  }
  const auto& a = r.annotations;
  if (a.rv && !in_unit_interval(*a.rv)) out.push_back({"rv", "out of [0,1]"});
  if (a.cd && !in_unit_interval(*a.cd)) out.push_back({"cd", "out of [0,1]"});
  if (r.lineage.empty() || r.lineage.front() != stage_names::generated) {
    out.push_back({"lineage", "must begin with \"generated\""});
  }
  for (const auto& s : r.lineage) {
    if (!is_lineage_stage(s)) out.push_back({"lineage", "unknown stage \"" + s + "\""});
  }
  if (a.rewritten && !r.has_stage(stage_names::rewritten)) {
    out.push_back({"rewritten", "requires \"rewritten\" in lineage"});
  }
  return out;
}

std::vector<Violation> validate_profile(const StudentProfile& p) {
  std::vector<Violation> out;
  if (p.name.empty()) out.push_back({"name", "must be non-empty"});
  auto check = [&](const ScoreWindow& w, const char* field) {
    if (!(0.0 <= w.low && w.low <= w.high && w.high <= 1.0)) {
      out.push_back({field, "must satisfy 0 <= low <= high <= 1"});
    }
  };
  check(p.cd_window, "cd_window");
  check(p.rv_window, "rv_window");
  if (p.target_size <= 0) out.push_back({"target_size", "must be > 0"});
  return out;
}

json to_json_value(const Problem& p) {
  json j = {{"id", p.id},
            {"task_domain", std::string(to_string(p.task_domain))},
            {"prompt", p.prompt},
            {"source", p.source}};
  if (p.reference_answer) j["reference_answer"] = *p.reference_answer;
  return j;
}

json to_json_value(const CoTRecord& r) {
  const auto& d = r.draft;
  const auto& a = r.annotations;
  json ann = {{"verified", std::string(to_string(a.verified))}, {"rewritten", a.rewritten}};
  if (a.difficulty) ann["difficulty"] = std::string(to_string(*a.difficulty));
  if (a.rv) ann["rv"] = *a.rv;
  if (a.cd) ann["cd"] = *a.cd;
  if (a.quarantined) ann["quarantined"] = true;
  json j = {{"id", r.id},
            {"problem", to_json_value(r.problem)},
            {"draft",
             {{"problem_id", d.problem_id},
              {"teacher_id", d.teacher_id},
              {"temperature", d.temperature},
              {"reasoning_text", d.reasoning_text},
              {"final_answer", d.final_answer},
              {"token_count", d.token_count}}},
            {"annotations", std::move(ann)},
            {"lineage", r.lineage}};
  if (!r.template_hashes.empty()) j["template_hashes"] = r.template_hashes;
  return j;
}

Problem problem_from_json(const json& j) {
  ObjectReader rd(j, "");
  Problem p;
  p.id = rd.string("id");
  auto domain = rd.string("task_domain");
  auto parsed = parse_task_domain(domain);
  if (!parsed) fail("task_domain", "must be one of math, code, science, other");
  p.task_domain = *parsed;
  p.prompt = rd.string("prompt");
  p.reference_answer = rd.opt_string("reference_answer");
  p.source = rd.string("source");
  rd.finish();
  return p;
}

CoTRecord record_from_json(const json& j) {
  ObjectReader rd(j, "");
  CoTRecord r;
  r.id = rd.string("id");

  {
    ObjectReader p(rd.require("problem"), "problem");
    r.problem.id = p.string("id");
    auto domain = parse_task_domain(p.string("task_domain"));
    if (!domain) fail("task_domain", "must be one of math, code, science, other");
    r.problem.task_domain = *domain;
    r.problem.prompt = p.string("prompt");
    r.problem.reference_answer = p.opt_string("reference_answer");
    r.problem.source = p.string("source");
    p.finish();
  }
  {
    ObjectReader d(rd.require("draft"), "draft");
    r.draft.problem_id = d.string("problem_id");
    r.draft.teacher_id = d.string("teacher_id");
    r.draft.temperature = d.number("temperature");
    r.draft.reasoning_text = d.string("reasoning_text");
    r.draft.final_answer = d.string("final_answer");
    r.draft.token_count = d.integer("token_count");
    d.finish();
  }
  {
    ObjectReader a(rd.require("annotations"), "annotations");
    if (auto s = a.opt_string("difficulty")) {
      auto diff = parse_difficulty(*s);
      if (!diff) fail("difficulty", "must be one of easy, medium, hard");
      r.annotations.difficulty = diff;
    }
    r.annotations.rv = a.opt_number("rv");
    r.annotations.cd = a.opt_number("cd");
    auto ver = parse_verification(a.string("verified"));
    if (!ver) fail("verified", "must be one of unverified, kept, discarded");
    r.annotations.verified = *ver;
    r.annotations.rewritten = a.boolean("rewritten");
    r.annotations.quarantined = a.boolean("quarantined", false);
    a.finish();
  }
  {
    const json& lin = rd.require("lineage");
    if (!lin.is_array()) fail("lineage", "must be an array");
    for (const auto& s : lin) {
      if (!s.is_string()) fail("lineage", "entries must be strings");
      r.lineage.push_back(s.get<std::string>());
    }
  }
  if (const json* th = rd.find("template_hashes")) {
    if (!th->is_object()) fail("template_hashes", "must be an object");
    for (auto it = th->begin(); it != th->end(); ++it) {
      if (!it->is_string()) fail("template_hashes." + it.key(), "must be a string");
      r.template_hashes[it.key()] = it->get<std::string>();
    }
  }
  rd.finish();
  return r;
}

namespace {
json parse_json_line(std::string_view line) {
  try {
    return json::parse(line.begin(), line.end());
  } catch (const json::parse_error& e) {
    throw ParseError("malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what(),
                     e.byte);
  }
}
}  // namespace

CoTRecord parse_record(std::string_view line) {
  CoTRecord r = record_from_json(parse_json_line(line));
  auto violations = validate_record(r);
  if (!violations.empty()) throw ValidationError(std::move(violations));
  return r;
}

std::string serialize_record(const CoTRecord& r) { return to_json_value(r).dump(); }

Problem parse_problem(std::string_view line) {
  Problem p = problem_from_json(parse_json_line(line));
  auto violations = validate_problem(p);
  if (!violations.empty()) throw ValidationError(std::move(violations));
  return p;
}

std::string serialize_problem(const Problem& p) { return to_json_value(p).dump(); }

namespace {
template <typename F>
void for_each_line(const std::string& path, F&& f) {
  auto lines = split_lines(read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    try {
      f(lines[i]);
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(i + 1) + ": " + e.what(), e.offset());
    } catch (const ValidationError& e) {
      std::vector<Violation> vs = e.violations();
      for (auto& v : vs) v.field = path + ":" + std::to_string(i + 1) + ": " + v.field;
      throw ValidationError(std::move(vs));
    }
  }
}
}  // namespace

std::vector<Problem> read_problems(const std::string& path) {
  std::vector<Problem> out;
  std::set<std::string> ids;
  for_each_line(path, [&](const std::string& line) {
    Problem p = parse_problem(line);
    if (!ids.insert(p.id).second) fail("id", "duplicate problem id \"" + p.id + "\"");
    out.push_back(std::move(p));
  });
  return out;
}

std::vector<CoTRecord> read_records(const std::string& path) {
  std::vector<CoTRecord> out;
  for_each_line(path, [&](const std::string& line) { out.push_back(parse_record(line)); });
  return out;
}

void write_records(const std::string& path, const std::vector<CoTRecord>& records) {
  std::string content;
  for (const auto& r : records) {
    content += serialize_record(r);
    content += '\n';
  }
  write_file_atomic(path, content);
}

}  // namespace cotforge
