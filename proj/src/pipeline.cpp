#include "cotforge/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "cotforge/errors.hpp"
#include "cotforge/io.hpp"
#include "cotforge/record_json.hpp"

namespace cotforge::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kStageNames[] = {"generate", "difficulty", "rewrite", "verify",
                                            "rv",       "cd",         "sample",  "curriculum"};

void require_known_keys(const json& j, std::initializer_list<std::string_view> keys,
                        const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, _] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError(where + ": unknown key \"" + k + "\"");
    }
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

std::string expand_env(const std::string& s) {
  static const std::regex var(R"(\$\{([A-Za-z_][A-Za-z0-9_]*)\})");
  std::string out;
  auto begin = std::sregex_iterator(s.begin(), s.end(), var);
  std::size_t last = 0;
  for (auto it = begin; it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    out.append(s, last, static_cast<std::size_t>(m.position()) - last);
    const char* value = std::getenv(m[1].str().c_str());
    if (!value) throw ConfigError("environment variable " + m[1].str() + " is not set");
    out += value;
    last = static_cast<std::size_t>(m.position() + m.length());
  }
  out.append(s, last);
  return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

ScoreWindow parse_window(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw ConfigError(where + ": expected [low, high]");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

std::set<Difficulty> parse_filter(const json& j, const std::string& where) {
  std::set<Difficulty> out;
  auto add = [&](const json& v) {
    auto d = v.is_string() ? parse_difficulty(v.get<std::string>()) : std::nullopt;
    if (!d) throw ConfigError(where + ": bad difficulty " + v.dump());
    out.insert(*d);
  };
  if (j.is_array()) {
    for (const auto& v : j) add(v);
  } else {
    add(j);
  }
  return out;
}

std::optional<TaskDomain> domain_key(const std::string& s) { return parse_task_domain(s); }

long long total_requests(const gateway::GatewayStats& s) {
  long long n = 0;
  for (const auto& [_, t] : s.teachers) n += t.requests_sent;
  return n;
}

std::string records_to_jsonl(std::span<const CoTRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += serialize_record(r);
    out += '\n';
  }
  return out;
}

// Writes "<stage>.NNNNN.jsonl" shards (at least one) and removes stale higher-numbered ones.
std::vector<std::string> write_shards(const fs::path& dir, std::string_view stage,
                                      std::span<const CoTRecord> records, std::size_t shard_size) {
  fs::create_directories(dir);
  std::vector<std::string> names;
  std::size_t index = 0;
  for (std::size_t begin = 0; begin < records.size() || index == 0; begin += shard_size) {
    const std::size_t end = std::min(records.size(), begin + shard_size);
    auto name = shard_file_name(stage, index++);
    write_file_atomic(dir / name, records_to_jsonl(records.subspan(begin, end - begin)));
    names.push_back(std::move(name));
    if (end >= records.size()) break;
  }
  const std::string prefix = std::string(stage) + ".";
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto file = entry.path().filename().string();
    if (is_shard_file_name(file) && file.starts_with(prefix) &&
        std::find(names.begin(), names.end(), file) == names.end()) {
      fs::remove(entry.path());
    }
  }
  return names;
}

std::vector<CoTRecord> read_record_inputs(const fs::path& in) {
  if (!fs::exists(in)) throw DependencyError("missing stage input: " + in.string());
  std::vector<CoTRecord> out;
  for (const auto& file : expand_inputs(in)) {
    auto part = read_records(file.string());
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

std::string iso_timestamp() {
  auto now = std::chrono::system_clock::now();
  auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// One input unit of a record stage: a problem for generate, a record otherwise.
struct Item {
  std::string id;
  std::optional<Problem> problem;
  std::optional<CoTRecord> record;
};

// Processed result for one input, as journaled.
struct Entry {
  std::string id;
  std::vector<CoTRecord> out;
  std::vector<CoTRecord> rejects;
  std::vector<std::string> warnings;
  long long calls = 0;
  long long discarded = 0;
  long long unverified = 0;
  long long quarantined = 0;

  json to_json() const {
    json j;
    j["id"] = id;
    j["out"] = json::array();
    for (const auto& r : out) j["out"].push_back(to_json_value(r));
    j["rejects"] = json::array();
    for (const auto& r : rejects) j["rejects"].push_back(to_json_value(r));
    j["warnings"] = warnings;
    j["calls"] = calls;
    j["discarded"] = discarded;
    j["unverified"] = unverified;
    j["quarantined"] = quarantined;
    return j;
  }

  static Entry from_json(const json& j) {
    Entry e;
    e.id = j.at("id").get<std::string>();
    for (const auto& r : j.at("out")) e.out.push_back(record_from_json(r));
    for (const auto& r : j.at("rejects")) e.rejects.push_back(record_from_json(r));
    e.warnings = j.at("warnings").get<std::vector<std::string>>();
    e.calls = j.at("calls").get<long long>();
    e.discarded = j.at("discarded").get<long long>();
    e.unverified = j.at("unverified").get<long long>();
    e.quarantined = j.at("quarantined").get<long long>();
    return e;
  }
};

fs::path checkpoint_path(const fs::path& dir, Stage s) {
  return dir / (std::string(to_string(s)) + ".checkpoint.json");
}
fs::path journal_path(const fs::path& dir, Stage s) {
  return dir / (std::string(to_string(s)) + ".journal.jsonl");
}
fs::path report_path(const fs::path& dir, Stage s) {
  return dir / (std::string(to_string(s)) + ".report.json");
}

// Loads intact journal lines; a torn trailing line from an interrupted run is dropped and the
// journal is rewritten without it.
std::map<std::string, Entry> load_journal(const fs::path& path) {
  std::map<std::string, Entry> entries;
  if (!fs::exists(path)) return entries;
  const std::string text = read_file(path);
  std::string clean;
  for (const auto& line : split_lines(text)) {
    if (line.empty()) continue;
    try {
      auto e = Entry::from_json(json::parse(line));
      if (entries.emplace(e.id, std::move(e)).second) {
        clean += line;
        clean += '\n';
      }
    } catch (const std::exception&) {
      // torn write
    }
  }
  if (clean != text) write_file_atomic(path, clean);
  return entries;
}

void write_json_file(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace

std::string_view to_string(Stage s) { return kStageNames[static_cast<int>(s)]; }

std::optional<Stage> parse_stage(std::string_view s) {
  for (int i = 0; i < 8; ++i) {
    if (kStageNames[i] == s) return static_cast<Stage>(i);
  }
  return std::nullopt;
}

const std::vector<Stage>& canonical_order() {
  static const std::vector<Stage> order{Stage::generate, Stage::difficulty, Stage::rewrite,
                                        Stage::verify,   Stage::rv,         Stage::cd,
                                        Stage::sample,   Stage::curriculum};
  return order;
}

bool is_record_stage(Stage s) { return s != Stage::sample && s != Stage::curriculum; }

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
  require_known_keys(j,
                     {"seed", "input", "work_dir", "prompts_dir", "shard_size", "teachers",
                      "generate", "judging", "stages", "abort_after_consecutive_failures",
                      "reward", "profiles", "rebalance", "schedule"},
                     "config");
  PipelineConfig c;
  c.seed = get_or<std::uint64_t>(j, "seed", 0, "config");
  c.input = resolve(base_dir, get_or<std::string>(j, "input", "", "config"));
  c.work_dir = resolve(base_dir, get_or<std::string>(j, "work_dir", "work", "config"));
  c.prompts_dir = resolve(base_dir, get_or<std::string>(j, "prompts_dir", "", "config"));
  c.shard_size = get_or<std::size_t>(j, "shard_size", 10'000, "config");
  c.abort_after_consecutive_failures =
      get_or<int>(j, "abort_after_consecutive_failures", 8, "config");

  for (const auto& t : j.value("teachers", json::array())) {
    require_known_keys(t,
                       {"id", "model", "nodes", "max_in_flight_per_node", "request_timeout_ms",
                        "retry", "token"},
                       "teachers[]");
    gateway::TeacherEndpoint ep;
    ep.teacher_id = get_or<std::string>(t, "id", "", "teachers[]");
    const std::string where = "teacher \"" + ep.teacher_id + "\"";
    ep.model = get_or<std::string>(t, "model", "", where);
    ep.node_urls = get_or<std::vector<std::string>>(t, "nodes", {}, where);
    ep.max_in_flight_per_node = get_or<int>(t, "max_in_flight_per_node", 4, where);
    ep.request_timeout = std::chrono::milliseconds(get_or<long long>(t, "request_timeout_ms", 600'000, where));
    if (t.contains("retry")) {
      const auto& r = t.at("retry");
      require_known_keys(r, {"max_attempts", "backoff_base_ms"}, where + ".retry");
      ep.retry.max_attempts = get_or<int>(r, "max_attempts", 3, where);
      ep.retry.backoff_base =
          std::chrono::milliseconds(get_or<long long>(r, "backoff_base_ms", 200, where));
    }
    ep.bearer_token = expand_env(get_or<std::string>(t, "token", "", where));
    c.teachers.push_back(std::move(ep));
  }

  if (j.contains("generate")) {
    const auto& g = j.at("generate");
    require_known_keys(g, {"teachers", "temperatures", "per_combo"}, "generate");
    c.generate.teachers = get_or<std::vector<std::string>>(g, "teachers", {}, "generate");
    c.generate.temperatures =
        get_or<std::vector<double>>(g, "temperatures", c.generate.temperatures, "generate");
    c.generate.per_combo = get_or<int>(g, "per_combo", 1, "generate");
  }
  if (c.generate.teachers.empty()) {
    for (const auto& t : c.teachers) c.generate.teachers.push_back(t.teacher_id);
  }

  if (j.contains("judging")) {
    const auto& o = j.at("judging");
    require_known_keys(o,
                       {"judge_teacher", "rewrite_teacher", "reask_budget", "judge_verification",
                        "judge_temperature", "judge_max_tokens", "generation_max_tokens"},
                       "judging");
    auto& p = c.judging;
    p.judge_teacher = get_or<std::string>(o, "judge_teacher", "", "judging");
    p.rewrite_teacher = get_or<std::string>(o, "rewrite_teacher", "", "judging");
    p.reask_budget = get_or<int>(o, "reask_budget", p.reask_budget, "judging");
    p.judge_verification = get_or<bool>(o, "judge_verification", true, "judging");
    p.judge_temperature = get_or<double>(o, "judge_temperature", 0.0, "judging");
    p.judge_max_tokens = get_or<int>(o, "judge_max_tokens", p.judge_max_tokens, "judging");
    p.generation_max_tokens =
        get_or<int>(o, "generation_max_tokens", p.generation_max_tokens, "judging");
  }

  if (j.contains("stages")) {
    for (const auto& s : j.at("stages")) {
      StageSettings st;
      std::string name;
      if (s.is_string()) {
        name = s.get<std::string>();
      } else {
        require_known_keys(s, {"name", "concurrency"}, "stages[]");
        name = get_or<std::string>(s, "name", "", "stages[]");
        st.concurrency = get_or<int>(s, "concurrency", 8, "stage \"" + name + "\"");
      }
      auto parsed = parse_stage(name);
      if (!parsed) throw ConfigError("unknown stage \"" + name + "\"");
      st.stage = *parsed;
      c.stages.push_back(st);
    }
  } else {
    for (auto s : canonical_order()) c.stages.push_back({s, 8});
  }

  if (j.contains("reward")) {
    const auto& r = j.at("reward");
    require_known_keys(r, {"L_rv", "H_rv", "L_cd", "H_cd", "lambda_rv", "lambda_cd"}, "reward");
    c.reward.low_rv = get_or<double>(r, "L_rv", 0.0, "reward");
    c.reward.high_rv = get_or<double>(r, "H_rv", 1.0, "reward");
    c.reward.low_cd = get_or<double>(r, "L_cd", 0.0, "reward");
    c.reward.high_cd = get_or<double>(r, "H_cd", 1.0, "reward");
    c.reward.lambda_rv = get_or<double>(r, "lambda_rv", 1.0, "reward");
    c.reward.lambda_cd = get_or<double>(r, "lambda_cd", 1.0, "reward");
  }

  for (const auto& p : j.value("profiles", json::array())) {
    require_known_keys(p, {"name", "cd_window", "rv_window", "target_size"}, "profiles[]");
    StudentProfile prof;
    prof.name = get_or<std::string>(p, "name", "", "profiles[]");
    const std::string where = "profile \"" + prof.name + "\"";
    if (p.contains("cd_window")) prof.cd_window = parse_window(p.at("cd_window"), where + ".cd_window");
    if (p.contains("rv_window")) prof.rv_window = parse_window(p.at("rv_window"), where + ".rv_window");
    prof.target_size = get_or<long long>(p, "target_size", 1, where);
    c.profiles.push_back(std::move(prof));
  }

  if (j.contains("rebalance") && !j.at("rebalance").is_null()) {
    const auto& r = j.at("rebalance");
    require_known_keys(r, {"policy", "quota"}, "rebalance");
    const auto policy = get_or<std::string>(r, "policy", "uniform_min", "rebalance");
    if (policy == "uniform_min") {
      c.rebalance = sampler::RebalancePolicy::uniform();
    } else if (policy == "quota") {
      std::map<TaskDomain, long long> quota;
      for (const auto& [k, v] : r.value("quota", json::object()).items()) {
        auto d = domain_key(k);
        if (!d || !v.is_number_integer()) throw ConfigError("rebalance.quota: bad entry \"" + k + "\"");
        quota[*d] = v.get<long long>();
      }
      c.rebalance = sampler::RebalancePolicy::with_quota(std::move(quota));
    } else {
      throw ConfigError("rebalance.policy: unknown policy \"" + policy + "\"");
    }
  }

  if (j.contains("schedule")) {
    c.schedule.clear();
    for (const auto& e : j.at("schedule")) {
      require_known_keys(e, {"difficulty", "epochs"}, "schedule[]");
      if (!e.contains("difficulty")) throw ConfigError("schedule[]: missing difficulty");
      c.schedule.push_back({parse_filter(e.at("difficulty"), "schedule[].difficulty"),
                            get_or<int>(e, "epochs", 1, "schedule[]")});
    }
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  json j;
  try {
    j = json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j, fs::absolute(path).parent_path());
}

void PipelineConfig::validate() const {
  std::set<std::string> ids;
  for (const auto& t : teachers) {
    if (t.teacher_id.empty()) throw ConfigError("teacher with empty id");
    if (!ids.insert(t.teacher_id).second) throw ConfigError("duplicate teacher \"" + t.teacher_id + "\"");
    if (t.max_in_flight_per_node < 1) throw ConfigError(t.teacher_id + ": max_in_flight_per_node must be >= 1");
    if (t.retry.max_attempts < 1) throw ConfigError(t.teacher_id + ": retry.max_attempts must be >= 1");
  }
  auto known = [&](const std::string& id, const char* what) {
    if (!id.empty() && !ids.count(id)) throw ConfigError(std::string(what) + ": unknown teacher \"" + id + "\"");
  };
  for (const auto& t : generate.teachers) known(t, "generate.teachers");
  known(judging.judge_teacher, "judging.judge_teacher");
  known(judging.rewrite_teacher, "judging.rewrite_teacher");
  if (generate.temperatures.empty()) throw ConfigError("generate.temperatures must be non-empty");
  for (double t : generate.temperatures) {
    if (!(t >= 0.0)) throw ConfigError("generate.temperatures must be >= 0");
  }
  if (generate.per_combo < 1) throw ConfigError("generate.per_combo must be >= 1");
  if (judging.reask_budget < 0) throw ConfigError("judging.reask_budget must be >= 0");
  if (shard_size < 1) throw ConfigError("shard_size must be >= 1");
  if (abort_after_consecutive_failures < 1) throw ConfigError("abort_after_consecutive_failures must be >= 1");

  if (stages.empty() || stages.front().stage != Stage::generate) {
    throw ConfigError("stages must start with generate");
  }
  const auto& order = canonical_order();
  auto pos = [&](Stage s) { return std::find(order.begin(), order.end(), s) - order.begin(); };
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].concurrency < 1) throw ConfigError(std::string(to_string(stages[i].stage)) + ": concurrency must be >= 1");
    if (i > 0 && pos(stages[i].stage) <= pos(stages[i - 1].stage)) {
      throw ConfigError("stage order violates dependencies at \"" +
                        std::string(to_string(stages[i].stage)) + "\"");
    }
  }
  auto has = [&](Stage s) { return settings(s) != nullptr; };
  auto needs = [&](Stage s, Stage dep) {
    if (has(s) && !has(dep)) {
      throw ConfigError("stage \"" + std::string(to_string(s)) + "\" requires \"" +
                        std::string(to_string(dep)) + "\"");
    }
  };
  needs(Stage::rewrite, Stage::difficulty);
  needs(Stage::rv, Stage::verify);
  needs(Stage::cd, Stage::verify);
  needs(Stage::sample, Stage::rv);
  needs(Stage::sample, Stage::cd);
  needs(Stage::curriculum, Stage::difficulty);
  if (has(Stage::sample) && profiles.empty()) throw ConfigError("sample stage requires at least one profile");
  if (has(Stage::generate) && teachers.empty()) throw ConfigError("no teachers configured");
  if (prompts_dir.empty()) throw ConfigError("prompts_dir is required");

  try {
    reward.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("reward: ") + e.what());
  }
  std::set<std::string> names;
  for (const auto& p : profiles) {
    if (auto v = validate_profile(p); !v.empty()) {
      throw ConfigError("profile \"" + p.name + "\": " + ValidationError(std::move(v)).what());
    }
    if (!names.insert(p.name).second) throw ConfigError("duplicate profile \"" + p.name + "\"");
  }
  if (schedule.empty()) throw ConfigError("schedule must be non-empty");
  for (const auto& e : schedule) {
    if (e.epochs < 1) throw ConfigError("schedule epochs must be >= 1");
    if (e.difficulty_filter.empty()) throw ConfigError("schedule filter must be non-empty");
  }
}

const StageSettings* PipelineConfig::settings(Stage s) const {
  for (const auto& st : stages) {
    if (st.stage == s) return &st;
  }
  return nullptr;
}

json StageReport::to_json() const {
  return {{"stage", std::string(pipeline::to_string(stage))},
          {"in", in},
          {"out", out},
          {"skipped", skipped},
          {"discarded", discarded},
          {"failed", failed},
          {"unverified", unverified},
          {"quarantined", quarantined},
          {"teacher_calls", teacher_calls},
          {"complete", complete},
          {"warnings", warnings}};
}

json PipelineReport::to_json() const {
  json j;
  j["complete"] = complete;
  j["stages"] = json::array();
  for (const auto& s : stages) j["stages"].push_back(s.to_json());
  j["discard_rate"] = discard_rate;
  j["lengths"] = json::array();
  for (const auto& row : lengths) {
    j["lengths"].push_back({{"bucket", row.bucket}, {"count", row.count}, {"mean_tokens", row.mean_tokens}});
  }
  j["occupancy"] = json::object();
  for (const auto& [name, occ] : occupancy) j["occupancy"][name] = occ.to_json();
  j["manifests"] = json::array();
  for (const auto& m : manifests) j["manifests"].push_back(m.generic_string());
  return j;
}

Pipeline::Pipeline(PipelineConfig config, std::shared_ptr<gateway::Transport> transport)
    : config_(std::move(config)) {
  config_.validate();
  pool_ = std::make_unique<gateway::GatewayPool>(std::move(transport));
  for (const auto& t : config_.teachers) pool_->register_teacher(t);
  processors::JudgePromptSet prompts;
  try {
    prompts = processors::JudgePromptSet::load(config_.prompts_dir);
  } catch (const std::exception& e) {
    throw ConfigError("prompts: " + std::string(e.what()));
  }
  processors_ = std::make_unique<processors::Processors>(*pool_, std::move(prompts), config_.judging);
}

Pipeline::~Pipeline() = default;

json Pipeline::stage_fingerprint(Stage stage) const {
  const auto& p = processors_->prompts();
  const auto& o = config_.judging;
  json j{{"stage", std::string(to_string(stage))}, {"format", 1}};
  switch (stage) {
    case Stage::generate: {
      j["template"] = p.generate.hash();
      j["teachers"] = config_.generate.teachers;
      j["temperatures"] = config_.generate.temperatures;
      j["per_combo"] = config_.generate.per_combo;
      j["max_tokens"] = o.generation_max_tokens;
      json models = json::object();
      for (const auto& t : config_.teachers) models[t.teacher_id] = t.model;
      j["models"] = models;
      break;
    }
    case Stage::rewrite:
      j["template"] = p.rewrite.hash();
      j["rewrite_teacher"] = o.rewrite_teacher;
      j["temperature"] = o.judge_temperature;
      j["max_tokens"] = o.generation_max_tokens;
      break;
    default: {
      const processors::PromptTemplate* t = stage == Stage::difficulty ? &p.difficulty
                                            : stage == Stage::verify   ? &p.verify
                                            : stage == Stage::rv       ? &p.rv
                                                                       : &p.cd;
      j["template"] = t->hash();
      j["judge_teacher"] = o.judge_teacher;
      j["reask_budget"] = o.reask_budget;
      j["temperature"] = o.judge_temperature;
      j["max_tokens"] = o.judge_max_tokens;
      if (stage == Stage::verify) j["judge_verification"] = o.judge_verification;
      break;
    }
  }
  return j;
}

StageReport Pipeline::run_stage(Stage stage, const fs::path& in, const fs::path& out_dir,
                                const RunOptions& options) {
  std::vector<fs::path> manifests;
  StageReport report;
  if (is_record_stage(stage)) {
    report = run_record_stage(stage, in, out_dir, options);
  } else if (stage == Stage::sample) {
    report = run_sample(in, out_dir, nullptr, &manifests);
  } else {
    report = run_curriculum(in, out_dir, &manifests);
  }
  write_json_file(report_path(out_dir, stage), report.to_json());
  return report;
}

StageReport Pipeline::run_record_stage(Stage stage, const fs::path& in, const fs::path& out_dir,
                                       const RunOptions& options) {
  const StageSettings* st = config_.settings(stage);
  const int concurrency = st ? st->concurrency : 8;

  // Inputs.
  std::vector<Item> items;
  std::vector<std::string> input_files;
  if (!fs::exists(in)) throw DependencyError("missing stage input: " + in.string());
  const auto files = expand_inputs(in);
  if (files.empty()) throw DependencyError("no input shards in " + in.string());
  json input_hashes = json::array();
  for (const auto& f : files) {
    input_hashes.push_back({{"file", f.filename().string()}, {"sha256", sha256_hex(read_file(f))}});
  }
  if (stage == Stage::generate) {
    std::set<std::string> seen;
    for (const auto& f : files) {
      for (auto& p : read_problems(f.string())) {
        if (!seen.insert(p.id).second) throw ContractError("duplicate problem id \"" + p.id + "\"");
        std::string id = p.id;
        items.push_back({std::move(id), std::move(p), std::nullopt});
      }
    }
  } else {
    std::set<std::string> seen;
    for (auto& r : read_record_inputs(in)) {
      if (!seen.insert(r.id).second) throw ContractError("duplicate record id \"" + r.id + "\"");
      std::string id = r.id;
      items.push_back({std::move(id), std::nullopt, std::move(r)});
    }
  }

  // Checkpoint and journal.
  fs::create_directories(out_dir);
  const std::string settings_hash = sha256_hex(stage_fingerprint(stage).dump());
  const auto ckpt_file = checkpoint_path(out_dir, stage);
  const auto journal_file = journal_path(out_dir, stage);
  bool resumable = false;
  if (fs::exists(ckpt_file)) {
    try {
      auto ck = json::parse(read_file(ckpt_file));
      resumable = ck.at("input_hashes") == input_hashes && ck.at("settings_hash") == settings_hash;
    } catch (const std::exception&) {
      resumable = false;
    }
  }
  std::map<std::string, Entry> done;
  if (resumable) {
    done = load_journal(journal_file);
  } else {
    fs::remove(journal_file);
  }
  std::set<std::string> input_ids;
  for (const auto& it : items) input_ids.insert(it.id);
  for (auto it = done.begin(); it != done.end();) {
    it = input_ids.count(it->first) ? std::next(it) : done.erase(it);
  }

  auto write_checkpoint = [&](bool complete, const std::vector<std::string>& outputs) {
    json ids = json::array();
    for (const auto& it : items) {
      if (done.count(it.id)) ids.push_back(it.id);
    }
    write_json_file(ckpt_file, {{"stage", std::string(to_string(stage))},
                                {"input_hashes", input_hashes},
                                {"settings_hash", settings_hash},
                                {"completed_ids", ids},
                                {"complete", complete},
                                {"timestamp", iso_timestamp()},
                                {"output_files", outputs}});
  };
  write_checkpoint(false, {});

  std::vector<const Item*> pending;
  for (const auto& it : items) {
    if (!done.count(it.id)) pending.push_back(&it);
  }
  const std::size_t todo =
      options.max_records ? std::min<std::size_t>(pending.size(), static_cast<std::size_t>(std::max(0LL, *options.max_records)))
                          : pending.size();

  StageReport report;
  report.stage = stage;
  report.in = static_cast<long long>(items.size());
  report.skipped = static_cast<long long>(done.size());

  auto process = [&](const Item& item) -> std::optional<Entry> {
    Entry e;
    e.id = item.id;
    switch (stage) {
      case Stage::generate: {
        auto res = processors_->generate_cots(*item.problem, config_.generate.teachers,
                                              config_.generate.temperatures,
                                              config_.generate.per_combo);
        e.warnings = std::move(res.warnings);
        e.calls = res.calls;
        if (res.transport_failures > 0) return std::nullopt;
        e.out = std::move(res.records);
        break;
      }
      case Stage::difficulty:
      case Stage::rv:
      case Stage::cd: {
        auto res = stage == Stage::difficulty ? processors_->score_difficulty(*item.record)
                   : stage == Stage::rv       ? processors_->score_rv(*item.record)
                                              : processors_->score_cd(*item.record);
        e.warnings = std::move(res.warnings);
        e.calls = res.calls;
        if (res.record.annotations.quarantined) ++e.quarantined;
        e.out.push_back(std::move(res.record));
        break;
      }
      case Stage::rewrite: {
        const auto& d = item.record->annotations.difficulty;
        if (d && *d == Difficulty::medium) {
          e.out.push_back(*item.record);
          break;
        }
        auto res = processors_->rewrite_cot(*item.record);
        e.warnings = std::move(res.warnings);
        e.calls = res.calls;
        e.out.push_back(std::move(res.record));
        break;
      }
      case Stage::verify: {
        auto res = processors_->verify_cot(*item.record);
        e.warnings = std::move(res.warnings);
        e.calls = res.calls;
        const auto decision = res.record.annotations.verified;
        if (decision == Verification::kept) {
          e.out.push_back(std::move(res.record));
        } else {
          (decision == Verification::discarded ? e.discarded : e.unverified) += 1;
          e.rejects.push_back(std::move(res.record));
        }
        break;
      }
      default:
        break;
    }
    return e;
  };

  const long long calls_before = total_requests(pool_->stats());
  std::mutex mutex;
  std::ofstream journal(journal_file, std::ios::app | std::ios::binary);
  if (!journal) throw std::runtime_error("cannot open " + journal_file.string());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::atomic<int> consecutive_failures{0};
  std::atomic<long long> failed{0};
  std::exception_ptr fatal;
  std::vector<std::string> failure_warnings;

  auto worker = [&] {
    for (;;) {
      if (stop.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= todo) return;
      const Item& item = *pending[i];
      std::optional<Entry> entry;
      std::string failure;
      try {
        entry = process(item);
        if (!entry) failure = item.id + ": teacher unavailable";
      } catch (const gateway::TransportError& e) {
        failure = item.id + ": " + e.what();
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!fatal) fatal = std::current_exception();
        stop = true;
        return;
      }
      std::lock_guard lock(mutex);
      if (!entry) {
        ++failed;
        failure_warnings.push_back(failure);
        if (++consecutive_failures >= config_.abort_after_consecutive_failures) stop = true;
        continue;
      }
      consecutive_failures = 0;
      journal << entry->to_json().dump() << '\n';
      journal.flush();
      done.emplace(entry->id, std::move(*entry));
    }
  };

  const int n_threads = static_cast<int>(std::min<std::size_t>(std::max(1, concurrency), std::max<std::size_t>(1, todo)));
  std::vector<std::thread> threads;
  for (int t = 0; t < n_threads && todo > 0; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  journal.close();

  report.failed = failed.load();
  report.teacher_calls = total_requests(pool_->stats()) - calls_before;

  if (fatal) {
    write_checkpoint(false, {});
    std::rethrow_exception(fatal);
  }

  // Totals and warnings in input order.
  std::vector<CoTRecord> outputs;
  std::vector<CoTRecord> rejects;
  for (const auto& it : items) {
    auto e = done.find(it.id);
    if (e == done.end()) continue;
    const Entry& entry = e->second;
    report.out += static_cast<long long>(entry.out.size());
    report.discarded += entry.discarded;
    report.unverified += entry.unverified;
    report.quarantined += entry.quarantined;
    report.warnings.insert(report.warnings.end(), entry.warnings.begin(), entry.warnings.end());
    outputs.insert(outputs.end(), entry.out.begin(), entry.out.end());
    rejects.insert(rejects.end(), entry.rejects.begin(), entry.rejects.end());
  }
  std::sort(failure_warnings.begin(), failure_warnings.end());
  report.warnings.insert(report.warnings.end(), failure_warnings.begin(), failure_warnings.end());

  report.complete = done.size() == items.size();
  if (!report.complete) {
    const long long remaining = static_cast<long long>(items.size() - done.size());
    report.warnings.push_back(std::to_string(remaining) + " inputs not completed; rerun to resume");
    write_checkpoint(false, {});
    return report;
  }

  auto names = write_shards(out_dir, to_string(stage), outputs, config_.shard_size);
  const auto rejects_file = out_dir / (std::string(to_string(stage)) + ".rejects.jsonl");
  if (!rejects.empty()) {
    write_file_atomic(rejects_file, records_to_jsonl(rejects));
  } else if (fs::exists(rejects_file)) {
    fs::remove(rejects_file);
  }
  write_checkpoint(true, names);
  return report;
}

StageReport Pipeline::run_sample(const fs::path& in, const fs::path& out_dir,
                                 std::map<std::string, sampler::WindowOccupancy>* occupancy,
                                 std::vector<fs::path>* manifests) {
  StageReport report;
  report.stage = Stage::sample;
  auto records = read_record_inputs(in);
  report.in = static_cast<long long>(records.size());

  std::vector<CoTRecord> eligible;
  for (auto& r : records) {
    const auto& a = r.annotations;
    if (a.verified == Verification::kept && a.rv && a.cd && !a.quarantined) {
      eligible.push_back(std::move(r));
    }
  }
  if (const long long excluded = report.in - static_cast<long long>(eligible.size()); excluded > 0) {
    report.warnings.push_back(std::to_string(excluded) + " records not eligible for sampling");
  }
  if (config_.rebalance && !eligible.empty()) {
    eligible = sampler::task_rebalance(eligible, *config_.rebalance, config_.seed, &report.warnings);
  }

  std::unordered_map<std::string, const CoTRecord*> by_id;
  for (const auto& r : eligible) by_id.emplace(r.id, &r);

  fs::create_directories(out_dir);
  for (const auto& profile : config_.profiles) {
    if (occupancy) (*occupancy)[profile.name] = sampler::window_occupancy(eligible, profile);
    auto manifest = sampler::target_aware_sample(eligible, profile, config_.seed);
    std::vector<CoTRecord> chosen;
    for (const auto& id : manifest.record_ids) {
      CoTRecord r = *by_id.at(id);
      if (!r.has_stage(stage_names::sampled)) r.lineage.emplace_back(stage_names::sampled);
      chosen.push_back(std::move(r));
    }
    const fs::path dir = out_dir / profile.name;
    manifest.shard_files = write_shards(dir, "sample", chosen, config_.shard_size);
    manifest.profile = profile.name;
    write_json_file(dir / "manifest.json", manifest.to_json());
    if (manifests) manifests->push_back(dir / "manifest.json");
    report.out += static_cast<long long>(chosen.size());
  }
  return report;
}

StageReport Pipeline::run_curriculum(const fs::path& in, const fs::path& out_dir,
                                     std::vector<fs::path>* manifests) {
  StageReport report;
  report.stage = Stage::curriculum;
  if (!fs::exists(in)) throw DependencyError("missing stage input: " + in.string());

  // Either one sub-directory per profile or a flat record directory.
  std::vector<std::pair<std::string, fs::path>> sources;
  if (fs::is_directory(in)) {
    for (const auto& entry : fs::directory_iterator(in)) {
      if (entry.is_directory() && !expand_inputs(entry.path()).empty()) {
        sources.emplace_back(entry.path().filename().string(), entry.path());
      }
    }
    std::sort(sources.begin(), sources.end());
  }
  if (sources.empty()) sources.emplace_back("all", in);

  fs::create_directories(out_dir);
  for (const auto& [profile, dir] : sources) {
    auto records = read_record_inputs(dir);
    report.in += static_cast<long long>(records.size());
    auto phases = sampler::build_curriculum(records, config_.schedule, config_.seed);
    std::unordered_map<std::string, const CoTRecord*> by_id;
    for (const auto& r : records) by_id.emplace(r.id, &r);
    const fs::path profile_dir = out_dir / profile;
    for (auto& phase : phases) {
      std::vector<CoTRecord> members;
      for (const auto& id : phase.manifest.record_ids) members.push_back(*by_id.at(id));
      const std::string sub = "phase" + std::to_string(phase.phase_index);
      auto names = write_shards(profile_dir / sub, "curriculum", members, config_.shard_size);
      phase.manifest.shard_files.clear();
      for (const auto& n : names) phase.manifest.shard_files.push_back(sub + "/" + n);
      phase.manifest.profile = profile;
      const auto path = profile_dir / ("curriculum." + sub + ".json");
      write_json_file(path, phase.manifest.to_json());
      if (manifests) manifests->push_back(path);
      report.out += static_cast<long long>(members.size());
    }
  }
  return report;
}

PipelineReport Pipeline::run_all(const RunOptions& options) {
  PipelineReport report;
  const fs::path work = config_.work_dir;
  fs::create_directories(work);
  if (config_.input.empty()) throw ConfigError("config.input is required for run-all");

  std::optional<long long> budget = options.max_records;
  fs::path previous = config_.input;
  fs::path last_records;
  std::vector<fs::path> manifests;

  auto finish = [&] {
    for (const auto& s : report.stages) {
      if (s.stage == Stage::verify && s.in > 0) {
        report.discard_rate = static_cast<double>(s.discarded) / static_cast<double>(s.in);
      }
    }
    if (!last_records.empty() && fs::exists(last_records)) {
      auto records = read_record_inputs(last_records);
      const bool labeled = config_.settings(Stage::difficulty) != nullptr;
      report.lengths = sampler::length_report(
          records, labeled ? sampler::LengthBucket::difficulty : sampler::LengthBucket::teacher);
    }
    for (const auto& m : manifests) report.manifests.push_back(m.lexically_relative(work));
    write_json_file(work / "report.json", report.to_json());
  };

  for (const auto& st : config_.stages) {
    const Stage stage = st.stage;
    const fs::path out = work / std::string(to_string(stage));
    StageReport sr;
    try {
      if (is_record_stage(stage)) {
        RunOptions opts;
        opts.max_records = budget;
        sr = run_record_stage(stage, previous, out, opts);
        if (budget && sr.complete) *budget = std::max(0LL, *budget - (sr.in - sr.skipped));
        last_records = out;
        previous = out;
      } else if (stage == Stage::sample) {
        sr = run_sample(previous, out, &report.occupancy, &manifests);
        previous = out;
      } else {
        sr = run_curriculum(previous, out, &manifests);
      }
    } catch (...) {
      report.complete = false;
      finish();
      throw;
    }
    write_json_file(report_path(out, stage), sr.to_json());
    report.stages.push_back(sr);
    if (!sr.complete) {
      report.complete = false;
      break;
    }
  }
  finish();
  return report;
}

}  // namespace cotforge::pipeline
