#include <CLI11.hpp>

#include <charconv>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include <nlohmann/json.hpp>

#include "cotforge/errors.hpp"
#include "cotforge/io.hpp"
#include "cotforge/mock_server.hpp"
#include "cotforge/pipeline.hpp"
#include "cotforge/record.hpp"
#include "cotforge/reward.hpp"
#include "cotforge/sampler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cotforge;

namespace {

enum Exit : int { ok = 0, unexpected = 1, config_error = 2, stage_failure = 3, contract = 4 };

std::string shortest(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty() || out_path == "-") {
    std::cout << text;
  } else {
    write_file_atomic(out_path, text);
  }
}

std::vector<json> read_json_lines(const std::string& path) {
  std::vector<json> rows;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(read_file(path))) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what(), e.byte);
    }
  }
  return rows;
}

reward::RewardConfig load_reward_config(const std::string& path) {
  auto j = json::parse(read_file(path), nullptr, true, true);
  if (j.contains("reward")) j = j.at("reward");
  reward::RewardConfig cfg;
  cfg.low_rv = j.value("L_rv", 0.0);
  cfg.high_rv = j.value("H_rv", 1.0);
  cfg.low_cd = j.value("L_cd", 0.0);
  cfg.high_cd = j.value("H_cd", 1.0);
  cfg.lambda_rv = j.value("lambda_rv", 1.0);
  cfg.lambda_cd = j.value("lambda_cd", 1.0);
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw pipeline::ConfigError(std::string("reward config: ") + e.what());
  }
  return cfg;
}

double number_field(const json& row, const char* key, std::size_t line) {
  if (!row.contains(key) || !row.at(key).is_number()) {
    throw ContractError("row " + std::to_string(line) + ": missing numeric field \"" + key + "\"");
  }
  return row.at(key).get<double>();
}

int reward_eval(const std::string& in, const std::string& config, const std::string& out) {
  const auto cfg = load_reward_config(config);
  std::string text;
  std::size_t line = 0;
  for (const auto& row : read_json_lines(in)) {
    ++line;
    double r_fmt = 0.0;
    double r_acc = 0.0;
    if (row.contains("r_fmt")) {
      r_fmt = number_field(row, "r_fmt", line);
    } else if (row.contains("completion")) {
      r_fmt = reward::format_reward(row.at("completion").get<std::string>());
    } else {
      throw ContractError("row " + std::to_string(line) + ": needs r_fmt or completion");
    }
    if (row.contains("r_acc")) {
      r_acc = number_field(row, "r_acc", line);
    } else if (row.contains("answer") && row.contains("reference")) {
      r_acc = reward::accuracy_reward(row.at("answer").get<std::string>(),
                                      row.at("reference").get<std::string>());
    } else {
      throw ContractError("row " + std::to_string(line) + ": needs r_acc or answer+reference");
    }
    auto b = reward::total_reward(r_fmt, r_acc, number_field(row, "f_rv", line),
                                  number_field(row, "f_cd", line), cfg);
    json o{{"r_fmt", b.r_fmt}, {"r_acc", b.r_acc}, {"r_rv", b.r_rv}, {"r_cd", b.r_cd}, {"total", b.total}};
    for (const char* key : {"id", "group_id"}) {
      if (row.contains(key)) o[key] = row.at(key);
    }
    text += o.dump() + "\n";
  }
  emit(out, text);
  return ok;
}

int reward_advantages(const std::string& in, const std::string& field, const std::string& out) {
  auto rows = read_json_lines(in);
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].contains("group_id")) {
      throw ContractError("row " + std::to_string(i + 1) + ": missing group_id");
    }
    const auto& g = rows[i].at("group_id");
    groups[g.is_string() ? g.get<std::string>() : g.dump()].push_back(i);
    number_field(rows[i], field.c_str(), i + 1);
  }
  for (const auto& [_, idx] : groups) {
    std::vector<double> values;
    for (auto i : idx) values.push_back(rows[i].at(field).get<double>());
    auto adv = reward::group_advantages(values);
    for (std::size_t k = 0; k < idx.size(); ++k) rows[idx[k]]["advantage"] = adv[k];
  }
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  emit(out, text);
  return ok;
}

int report_lengths(const std::string& in, const std::string& by, const std::string& out) {
  auto bucket = sampler::parse_length_bucket(by);
  if (!bucket) throw pipeline::ConfigError("unknown bucket \"" + by + "\"");
  std::vector<CoTRecord> records;
  for (const auto& f : expand_inputs(in)) {
    auto part = read_records(f.string());
    records.insert(records.end(), part.begin(), part.end());
  }
  emit(out, sampler::format_length_report(sampler::length_report(records, *bucket)));
  return ok;
}

int print_stage_report(const pipeline::StageReport& r) {
  std::cout << r.to_json().dump(2) << "\n";
  return r.complete ? ok : stage_failure;
}

int run_mock(const std::string& scenario_path, const std::string& host, int port, int threads) {
  auto scenario = mock::Scenario::load(scenario_path);
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  mock::MockTeacherServer server(std::move(scenario), threads);
  const int bound = server.start(host, port);
  std::cout << "listening on " << host << ":" << bound << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  return ok;
}

template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const pipeline::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const gateway::ConfigurationError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const sampler::EmptySelectionError& e) {
    std::cerr << "stage failed: " << e.what() << "\n" << e.occupancy().describe() << "\n";
    return stage_failure;
  } catch (const sampler::EmptyPhaseError& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    return stage_failure;
  } catch (const pipeline::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return stage_failure;
  } catch (const gateway::TransportError& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    return stage_failure;
  } catch (const ContractError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return contract;
  } catch (const ValidationError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return contract;
  } catch (const ParseError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return contract;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return unexpected;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cotforge: chain-of-thought distillation data pipeline"};
  app.require_subcommand(1);
  int result = ok;

  std::string config;
  std::optional<long long> max_records;

  auto* run_all = app.add_subcommand("run-all", "Run every configured stage");
  run_all->add_option("-c,--config", config, "Pipeline config file")->required();
  run_all->add_option("--max-records", max_records, "Stop after this many inputs (resumable)");
  run_all->callback([&] {
    result = guarded([&] {
      pipeline::Pipeline p(pipeline::PipelineConfig::load(config));
      auto report = p.run_all({max_records});
      std::cout << report.to_json().dump(2) << "\n";
      return report.complete ? ok : stage_failure;
    });
  });

  std::string stage_name, in_path, out_path;
  auto* stage = app.add_subcommand("stage", "Run one stage over a shard file or directory");
  stage->add_option("name", stage_name, "Stage name")->required();
  stage->add_option("-c,--config", config, "Pipeline config file")->required();
  stage->add_option("--in", in_path, "Input shard file or directory")->required();
  stage->add_option("--out", out_path, "Output directory")->required();
  stage->add_option("--max-records", max_records, "Stop after this many inputs (resumable)");
  stage->callback([&] {
    result = guarded([&] {
      auto s = pipeline::parse_stage(stage_name);
      if (!s) throw pipeline::ConfigError("unknown stage \"" + stage_name + "\"");
      pipeline::Pipeline p(pipeline::PipelineConfig::load(config));
      return print_stage_report(p.run_stage(*s, in_path, out_path, {max_records}));
    });
  });

  auto* reward_cmd = app.add_subcommand("reward", "Shaped reward utilities");
  reward_cmd->require_subcommand(1);
  std::string reward_in, reward_out, field = "total";
  auto* eval = reward_cmd->add_subcommand("eval", "Score {r_fmt, r_acc, f_rv, f_cd} rows");
  eval->add_option("--in", reward_in, "Input JSONL")->required();
  eval->add_option("-c,--config", config, "Reward or pipeline config")->required();
  eval->add_option("--out", reward_out, "Output JSONL (default stdout)");
  eval->callback([&] { result = guarded([&] { return reward_eval(reward_in, config, reward_out); }); });
  auto* adv = reward_cmd->add_subcommand("advantages", "Group-relative advantages by group_id");
  adv->add_option("--in", reward_in, "Input JSONL")->required();
  adv->add_option("--field", field, "Reward field")->capture_default_str();
  adv->add_option("--out", reward_out, "Output JSONL (default stdout)");
  adv->callback([&] { result = guarded([&] { return reward_advantages(reward_in, field, reward_out); }); });

  auto* report = app.add_subcommand("report", "Dataset reports");
  report->require_subcommand(1);
  std::string by = "teacher";
  auto* lengths = report->add_subcommand("lengths", "Mean CoT length per bucket");
  lengths->add_option("--in", in_path, "Record shard file or directory")->required();
  lengths->add_option("--by", by, "all|teacher|domain|difficulty|source")->capture_default_str();
  lengths->add_option("--out", out_path, "Output file (default stdout)");
  lengths->callback([&] { result = guarded([&] { return report_lengths(in_path, by, out_path); }); });

  long long n = 0, c = 0, k = 0;
  auto* passk = app.add_subcommand("passk", "Unbiased pass@k estimate");
  passk->add_option("--n", n, "Samples")->required();
  passk->add_option("--c", c, "Correct samples")->required();
  passk->add_option("--k", k, "k")->required();
  passk->callback([&] {
    result = guarded([&] {
      std::cout << shortest(reward::pass_at_k(n, c, k)) << "\n";
      return ok;
    });
  });

  std::string scenario, host = "127.0.0.1";
  int port = 8080, threads = 64;
  auto* mock_cmd = app.add_subcommand("mock", "Serve a scripted mock teacher");
  mock_cmd->add_option("--scenario", scenario, "Scenario JSON")->required();
  mock_cmd->add_option("--port", port, "Port (0 picks one)")->capture_default_str();
  mock_cmd->add_option("--host", host, "Bind address")->capture_default_str();
  mock_cmd->add_option("--threads", threads, "Worker threads")->capture_default_str();
  mock_cmd->callback([&] { result = guarded([&] { return run_mock(scenario, host, port, threads); }); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }
  return result;
}
