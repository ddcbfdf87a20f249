#include "cotforge/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "cotforge/io.hpp"

namespace cotforge::sampler {

using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

// mt19937_64 output is fixed by the standard; the distribution helpers are not, so bounded
// draws and shuffles are done by hand to keep selections portable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % bound;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

std::string format_fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string difficulty_set_string(const std::set<Difficulty>& s) {
  std::string out = "{";
  for (auto d : s) {
    if (out.size() > 1) out += ",";
    out += to_string(d);
  }
  return out + "}";
}

int score_bin(double v) { return std::clamp(static_cast<int>(std::lround(v * 9.0)), 0, 9); }

}  // namespace

std::string content_hash(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  std::string joined;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) joined += '\n';
    joined += ids[i];
  }
  return sha256_hex(joined);
}

DatasetManifest make_manifest(std::span<const CoTRecord* const> selected, std::uint64_t seed) {
  DatasetManifest m;
  m.seed = seed;
  for (const auto* r : selected) {
    m.record_ids.push_back(r->id);
    ++m.counts_per_domain[std::string(to_string(r->problem.task_domain))];
  }
  std::sort(m.record_ids.begin(), m.record_ids.end());
  m.content_hash = content_hash(m.record_ids);
  return m;
}

json DatasetManifest::to_json() const {
  json j = {{"seed", seed},
            {"content_hash", content_hash},
            {"counts_per_domain", counts_per_domain},
            {"record_ids", record_ids},
            {"shard_files", shard_files}};
  if (phase) j["phase"] = *phase;
  if (epochs) j["epochs"] = *epochs;
  if (!difficulty_filter.empty()) {
    json f = json::array();
    for (auto d : difficulty_filter) f.push_back(std::string(to_string(d)));
    j["difficulty_filter"] = f;
  }
  if (!profile.empty()) j["profile"] = profile;
  return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.content_hash = j.at("content_hash").get<std::string>();
  m.counts_per_domain = j.at("counts_per_domain").get<std::map<std::string, long long>>();
  m.record_ids = j.at("record_ids").get<std::vector<std::string>>();
  m.shard_files = j.at("shard_files").get<std::vector<std::string>>();
  if (j.contains("phase")) m.phase = j.at("phase").get<int>();
  if (j.contains("epochs")) m.epochs = j.at("epochs").get<int>();
  if (j.contains("difficulty_filter")) {
    for (const auto& d : j.at("difficulty_filter")) {
      auto parsed = parse_difficulty(d.get<std::string>());
      if (!parsed) throw std::invalid_argument("bad difficulty in manifest filter");
      m.difficulty_filter.push_back(*parsed);
    }
  }
  m.profile = j.value("profile", std::string());
  return m;
}

std::vector<std::string> validate_manifest(const DatasetManifest& manifest,
                                           std::span<const CoTRecord> records) {
  std::vector<std::string> problems;
  std::map<std::string, const CoTRecord*> by_id;
  for (const auto& r : records) by_id.emplace(r.id, &r);

  std::set<std::string> seen;
  std::map<std::string, long long> counts;
  for (const auto& id : manifest.record_ids) {
    if (!seen.insert(id).second) problems.push_back("duplicate record id " + id);
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      problems.push_back("unknown record id " + id);
      continue;
    }
    const auto& a = it->second->annotations;
    if (a.verified == Verification::discarded) problems.push_back("discarded record " + id);
    if (a.quarantined) problems.push_back("quarantined record " + id);
    ++counts[std::string(to_string(it->second->problem.task_domain))];
  }
  long long total = 0;
  for (const auto& [_, c] : manifest.counts_per_domain) total += c;
  if (total != static_cast<long long>(manifest.record_ids.size())) {
    problems.push_back("counts_per_domain does not sum to the number of records");
  }
  if (problems.empty() && counts != manifest.counts_per_domain) {
    problems.push_back("counts_per_domain does not match the referenced records");
  }
  if (content_hash(manifest.record_ids) != manifest.content_hash) {
    problems.push_back("content_hash does not match record_ids");
  }
  return problems;
}

std::vector<CoTRecord> task_rebalance(std::span<const CoTRecord> records,
                                      const RebalancePolicy& policy, std::uint64_t seed,
                                      std::vector<std::string>* warnings) {
  if (records.empty()) throw ContractError("task_rebalance requires a non-empty record list");

  std::map<TaskDomain, std::vector<std::size_t>> by_domain;
  for (std::size_t i = 0; i < records.size(); ++i) {
    by_domain[records[i].problem.task_domain].push_back(i);
  }

  std::map<TaskDomain, long long> keep;
  if (policy.kind == RebalancePolicy::Kind::uniform_min) {
    long long floor = std::numeric_limits<long long>::max();
    for (const auto& [_, idx] : by_domain) floor = std::min<long long>(floor, idx.size());
    for (const auto& [d, _] : by_domain) keep[d] = floor;
  } else {
    for (const auto& [d, idx] : by_domain) {
      auto q = policy.quota.find(d);
      if (q == policy.quota.end()) {
        throw ContractError("quota does not cover domain " + std::string(to_string(d)));
      }
      if (q->second < 0) throw ContractError("quota must be >= 0");
      keep[d] = std::min<long long>(q->second, idx.size());
    }
    for (const auto& [d, _] : policy.quota) {
      if (!by_domain.count(d) && warnings) {
        warnings->push_back("quota for absent domain " + std::string(to_string(d)) + " ignored");
      }
    }
  }

  std::vector<std::size_t> chosen;
  for (auto& [domain, idx] : by_domain) {
    // Shuffle in canonical id order so the result does not depend on input order.
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return records[a].id < records[b].id; });
    Rng rng(mix(seed, to_string(domain)));
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(keep[domain]));
    chosen.insert(chosen.end(), idx.begin(), idx.end());
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<CoTRecord> out;
  out.reserve(chosen.size());
  for (auto i : chosen) out.push_back(records[i]);
  return out;
}

WindowOccupancy window_occupancy(std::span<const CoTRecord> records,
                                 const StudentProfile& profile) {
  WindowOccupancy o;
  for (const auto& r : records) {
    ++o.total;
    const auto& a = r.annotations;
    const bool cd_in = a.cd && profile.cd_window.contains(*a.cd);
    const bool rv_in = a.rv && profile.rv_window.contains(*a.rv);
    if (a.cd) ++o.cd_hist[score_bin(*a.cd)];
    if (a.rv) ++o.rv_hist[score_bin(*a.rv)];
    o.in_cd += cd_in;
    o.in_rv += rv_in;
    o.in_both += cd_in && rv_in;
  }
  return o;
}

std::string WindowOccupancy::describe() const {
  auto hist = [](const std::array<long long, 10>& h) {
    std::string s = "[";
    for (std::size_t k = 0; k < h.size(); ++k) {
      if (k) s += " ";
      s += std::to_string(k) + "/9:" + std::to_string(h[k]);
    }
    return s + "]";
  };
  return "total=" + std::to_string(total) + " in_cd=" + std::to_string(in_cd) +
         " in_rv=" + std::to_string(in_rv) + " in_both=" + std::to_string(in_both) +
         " cd_hist=" + hist(cd_hist) + " rv_hist=" + hist(rv_hist);
}

json WindowOccupancy::to_json() const {
  return {{"total", total}, {"in_cd", in_cd},     {"in_rv", in_rv},
          {"in_both", in_both}, {"cd_hist", cd_hist}, {"rv_hist", rv_hist}};
}

EmptySelectionError::EmptySelectionError(const std::string& profile, WindowOccupancy occupancy)
    : std::runtime_error("profile \"" + profile + "\": no records inside the score windows; " +
                         occupancy.describe()),
      occupancy_(occupancy) {}

DatasetManifest target_aware_sample(std::span<const CoTRecord> records,
                                    const StudentProfile& profile, std::uint64_t seed) {
  if (auto v = validate_profile(profile); !v.empty()) throw ValidationError(std::move(v));
  for (const auto& r : records) {
    const auto& a = r.annotations;
    if (!a.rv || !a.cd || a.verified != Verification::kept || a.quarantined) {
      throw ContractError(r.id + ": target_aware_sample requires kept records with rv and cd");
    }
  }

  std::map<std::string, std::vector<const CoTRecord*>> by_problem;
  std::size_t in_window = 0;
  for (const auto& r : records) {
    if (profile.cd_window.contains(*r.annotations.cd) &&
        profile.rv_window.contains(*r.annotations.rv)) {
      by_problem[r.problem.id].push_back(&r);
      ++in_window;
    }
  }
  if (in_window == 0) throw EmptySelectionError(profile.name, window_occupancy(records, profile));

  std::vector<const CoTRecord*> selected;
  const auto target = static_cast<std::size_t>(profile.target_size);
  if (in_window <= target) {
    for (const auto& [_, list] : by_problem) selected.insert(selected.end(), list.begin(), list.end());
  } else {
    Rng rng(mix(seed, profile.name));
    std::vector<std::vector<const CoTRecord*>> groups;
    for (auto& [_, list] : by_problem) {
      std::sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->id < b->id; });
      rng.shuffle(list);
      groups.push_back(list);
    }
    rng.shuffle(groups);
    for (std::size_t round = 0; selected.size() < target; ++round) {
      std::vector<const CoTRecord*> candidates;
      for (const auto& g : groups) {
        if (round < g.size()) candidates.push_back(g[round]);
      }
      const std::size_t room = target - selected.size();
      if (candidates.size() > room) candidates.resize(room);
      selected.insert(selected.end(), candidates.begin(), candidates.end());
    }
  }
  DatasetManifest m = make_manifest(selected, seed);
  m.profile = profile.name;
  return m;
}

std::vector<ScheduleEntry> default_schedule() {
  return {{{Difficulty::medium}, 3}, {{Difficulty::hard}, 1}};
}

std::vector<CurriculumPhase> build_curriculum(std::span<const CoTRecord> records,
                                              std::span<const ScheduleEntry> schedule,
                                              std::uint64_t seed) {
  if (schedule.empty()) throw ContractError("build_curriculum requires a non-empty schedule");
  for (const auto& r : records) {
    if (!r.annotations.difficulty) throw ContractError(r.id + ": record has no difficulty label");
    if (r.annotations.verified == Verification::discarded || r.annotations.quarantined) {
      throw ContractError(r.id + ": discarded or quarantined records cannot enter a curriculum");
    }
  }
  std::vector<bool> assigned(records.size(), false);
  std::vector<CurriculumPhase> phases;
  for (std::size_t p = 0; p < schedule.size(); ++p) {
    const auto& entry = schedule[p];
    if (entry.epochs < 1) throw ContractError("curriculum epochs must be >= 1");
    if (entry.difficulty_filter.empty()) throw ContractError("curriculum filter must be non-empty");
    std::vector<const CoTRecord*> members;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (!assigned[i] && entry.difficulty_filter.count(*records[i].annotations.difficulty)) {
        assigned[i] = true;
        members.push_back(&records[i]);
      }
    }
    const int index = static_cast<int>(p) + 1;
    if (members.empty()) {
      throw EmptyPhaseError("curriculum phase " + std::to_string(index) + " " +
                            difficulty_set_string(entry.difficulty_filter) +
                            " matches no records");
    }
    CurriculumPhase phase;
    phase.phase_index = index;
    phase.difficulty_filter = entry.difficulty_filter;
    phase.epochs = entry.epochs;
    phase.manifest = make_manifest(members, seed);
    phase.manifest.phase = index;
    phase.manifest.epochs = entry.epochs;
    phase.manifest.difficulty_filter.assign(entry.difficulty_filter.begin(),
                                            entry.difficulty_filter.end());
    phases.push_back(std::move(phase));
  }
  return phases;
}

std::optional<LengthBucket> parse_length_bucket(std::string_view s) {
  if (s == "all") return LengthBucket::all;
  if (s == "teacher") return LengthBucket::teacher;
  if (s == "domain") return LengthBucket::domain;
  if (s == "difficulty") return LengthBucket::difficulty;
  if (s == "source") return LengthBucket::source;
  return std::nullopt;
}

std::vector<LengthRow> length_report(std::span<const CoTRecord> records, LengthBucket by) {
  std::map<std::string, std::pair<long long, long long>> acc;  // bucket -> (count, sum)
  for (const auto& r : records) {
    std::string key;
    switch (by) {
      case LengthBucket::all: key = "all"; break;
      case LengthBucket::teacher: key = r.draft.teacher_id; break;
      case LengthBucket::domain: key = std::string(to_string(r.problem.task_domain)); break;
      case LengthBucket::difficulty:
        key = r.annotations.difficulty ? std::string(to_string(*r.annotations.difficulty))
                                       : "unlabeled";
        break;
      case LengthBucket::source: key = r.problem.source; break;
    }
    auto& [count, sum] = acc[key];
    ++count;
    sum += r.draft.token_count;
  }
  std::vector<LengthRow> rows;
  for (const auto& [key, cs] : acc) {
    rows.push_back({key, cs.first, static_cast<double>(cs.second) / static_cast<double>(cs.first)});
  }
  return rows;
}

std::string format_length_report(std::span<const LengthRow> rows) {
  std::string out = "bucket\tcount\tmean_tokens\n";
  for (const auto& r : rows) {
    out += r.bucket + "\t" + std::to_string(r.count) + "\t" + format_fixed2(r.mean_tokens) + "\n";
  }
  return out;
}

}  // namespace cotforge::sampler
