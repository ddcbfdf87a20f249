#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotforge/record.hpp"

namespace cotforge::sampler {

struct DatasetManifest {
  std::vector<std::string> record_ids;  // sorted
  std::vector<std::string> shard_files;
  std::map<std::string, long long> counts_per_domain;
  std::uint64_t seed = 0;
  std::string content_hash;
  // Set for curriculum phase manifests.
  std::optional<int> phase;
  std::optional<int> epochs;
  std::vector<Difficulty> difficulty_filter;
  std::string profile;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

// SHA-256 over the sorted ids joined by '\n'.
std::string content_hash(std::vector<std::string> ids);

DatasetManifest make_manifest(std::span<const CoTRecord* const> selected, std::uint64_t seed);

// Problems with the manifest: duplicate ids, bad counts or hash, unknown ids, and any
// discarded or quarantined record it references.
std::vector<std::string> validate_manifest(const DatasetManifest& manifest,
                                           std::span<const CoTRecord> records);

struct RebalancePolicy {
  enum class Kind { uniform_min, quota };
  Kind kind = Kind::uniform_min;
  std::map<TaskDomain, long long> quota;

  static RebalancePolicy uniform() { return {}; }
  static RebalancePolicy with_quota(std::map<TaskDomain, long long> q) {
    return {Kind::quota, std::move(q)};
  }
};

// Seeded downsampling without replacement, per task domain. Selected records keep their
// input order.
std::vector<CoTRecord> task_rebalance(std::span<const CoTRecord> records,
                                      const RebalancePolicy& policy, std::uint64_t seed,
                                      std::vector<std::string>* warnings = nullptr);

// Score occupancy of a record set against a profile. Histogram bin k counts scores that
// round to k/9.
struct WindowOccupancy {
  long long total = 0;
  long long in_cd = 0;
  long long in_rv = 0;
  long long in_both = 0;
  std::array<long long, 10> cd_hist{};
  std::array<long long, 10> rv_hist{};

  std::string describe() const;
  nlohmann::json to_json() const;
};

WindowOccupancy window_occupancy(std::span<const CoTRecord> records, const StudentProfile& profile);

class EmptySelectionError : public std::runtime_error {
 public:
  EmptySelectionError(const std::string& profile, WindowOccupancy occupancy);
  const WindowOccupancy& occupancy() const noexcept { return occupancy_; }

 private:
  WindowOccupancy occupancy_;
};

// Keeps records inside both closed score windows; above target_size, selection takes at most
// one CoT per problem per round, seeded-uniform within a round.
DatasetManifest target_aware_sample(std::span<const CoTRecord> records,
                                    const StudentProfile& profile, std::uint64_t seed);

struct ScheduleEntry {
  std::set<Difficulty> difficulty_filter;
  int epochs = 1;
};

// Medium-level CoTs for three epochs, then hard ones for one.
std::vector<ScheduleEntry> default_schedule();

struct CurriculumPhase {
  int phase_index = 1;
  std::set<Difficulty> difficulty_filter;
  int epochs = 1;
  DatasetManifest manifest;
};

class EmptyPhaseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Partitions records into phases; a record goes to the first phase whose filter matches it.
std::vector<CurriculumPhase> build_curriculum(std::span<const CoTRecord> records,
                                              std::span<const ScheduleEntry> schedule,
                                              std::uint64_t seed = 0);

enum class LengthBucket { all, teacher, domain, difficulty, source };
std::optional<LengthBucket> parse_length_bucket(std::string_view s);

struct LengthRow {
  std::string bucket;
  long long count = 0;
  double mean_tokens = 0.0;
};

std::vector<LengthRow> length_report(std::span<const CoTRecord> records, LengthBucket by);
// Tab-separated table, means with two decimals.
std::string format_length_report(std::span<const LengthRow> rows);

}  // namespace cotforge::sampler
