#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotforge/gateway.hpp"
#include "cotforge/processors.hpp"
#include "cotforge/record.hpp"
#include "cotforge/reward.hpp"
#include "cotforge/sampler.hpp"

namespace cotforge::pipeline {

enum class Stage { generate, difficulty, rewrite, verify, rv, cd, sample, curriculum };

std::string_view to_string(Stage s);
std::optional<Stage> parse_stage(std::string_view s);
// Dependency order of all stages.
const std::vector<Stage>& canonical_order();
bool is_record_stage(Stage s);

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageSettings {
  Stage stage = Stage::generate;
  int concurrency = 8;
};

struct GenerateSettings {
  std::vector<std::string> teachers;
  std::vector<double> temperatures{0.6};
  int per_combo = 1;
};

struct PipelineConfig {
  std::vector<gateway::TeacherEndpoint> teachers;
  std::vector<StageSettings> stages;
  std::filesystem::path prompts_dir;
  reward::RewardConfig reward;
  std::vector<StudentProfile> profiles;
  std::vector<sampler::ScheduleEntry> schedule = sampler::default_schedule();
  std::uint64_t seed = 0;

  GenerateSettings generate;
  processors::ProcessorOptions judging;
  std::optional<sampler::RebalancePolicy> rebalance;
  std::filesystem::path input;
  std::filesystem::path work_dir = "work";
  std::size_t shard_size = 10'000;
  // A record stage stops dispatching after this many consecutive failed records.
  int abort_after_consecutive_failures = 8;

  // Relative paths resolve against base_dir. "${VAR}" is expanded in teacher tokens only.
  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  // JSON with comments allowed.
  static PipelineConfig load(const std::filesystem::path& path);

  // Throws ConfigError.
  void validate() const;
  const StageSettings* settings(Stage s) const;
};

struct StageReport {
  Stage stage = Stage::generate;
  long long in = 0;
  long long out = 0;
  long long skipped = 0;
  long long discarded = 0;
  long long failed = 0;
  long long unverified = 0;
  long long quarantined = 0;
  long long teacher_calls = 0;
  bool complete = true;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

struct PipelineReport {
  std::vector<StageReport> stages;
  bool complete = true;
  double discard_rate = 0.0;
  std::vector<sampler::LengthRow> lengths;
  std::map<std::string, sampler::WindowOccupancy> occupancy;
  std::vector<std::filesystem::path> manifests;

  nlohmann::json to_json() const;
};

struct RunOptions {
  // Process at most this many not-yet-completed inputs, then stop with a resumable checkpoint.
  std::optional<long long> max_records;
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config,
                    std::shared_ptr<gateway::Transport> transport = gateway::make_http_transport());
  ~Pipeline();

  const PipelineConfig& config() const { return config_; }
  gateway::GatewayPool& gateway() { return *pool_; }

  // Record stages read a shard file or directory and write "<stage>.NNNNN.jsonl" shards plus a
  // checkpoint into out_dir. sample writes one sub-directory per profile; curriculum writes
  // phase manifests per profile.
  StageReport run_stage(Stage stage, const std::filesystem::path& in,
                        const std::filesystem::path& out_dir, const RunOptions& options = {});

  // Runs the configured stages under config.work_dir and writes report.json there.
  PipelineReport run_all(const RunOptions& options = {});

 private:
  StageReport run_record_stage(Stage stage, const std::filesystem::path& in,
                               const std::filesystem::path& out_dir, const RunOptions& options);
  StageReport run_sample(const std::filesystem::path& in, const std::filesystem::path& out_dir,
                         std::map<std::string, sampler::WindowOccupancy>* occupancy,
                         std::vector<std::filesystem::path>* manifests);
  StageReport run_curriculum(const std::filesystem::path& in, const std::filesystem::path& out_dir,
                             std::vector<std::filesystem::path>* manifests);
  nlohmann::json stage_fingerprint(Stage stage) const;

  PipelineConfig config_;
  std::unique_ptr<gateway::GatewayPool> pool_;
  std::unique_ptr<processors::Processors> processors_;
};

}  // namespace cotforge::pipeline
