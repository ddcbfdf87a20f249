#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cotforge::mock {

// A request matches when every present criterion holds. `contains` substrings are searched in
// the newline-joined message contents.
struct Match {
  std::optional<std::string> node;
  std::optional<std::string> model;
  std::optional<double> temperature;
  std::vector<std::string> contains;
};

enum class Action { respond, fail };

struct Rule {
  std::string name;
  Match match;
  Action action = Action::respond;
  std::string content;
  int status = 500;
  int delay_ms = 0;
  // Rule is used at most this many times.
  std::optional<long long> times;
  // Rule only applies once this many requests have been served in total.
  std::optional<long long> after_calls;
};

// Scripted responses: the first matching rule wins; unmatched requests get `fallback`.
struct Scenario {
  std::vector<Rule> rules;
  Rule fallback{"fallback", {}, Action::respond, "OK", 500, 0, {}, {}};

  static Scenario from_json(const nlohmann::json& j);
  static Scenario load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

struct NodeCounters {
  long long calls = 0;
  long long failures = 0;
  long long in_flight = 0;
  long long peak_in_flight = 0;
};

struct MockStats {
  long long total_calls = 0;
  long long in_flight = 0;
  long long peak_in_flight = 0;
  std::map<std::string, NodeCounters> nodes;
  std::map<std::string, long long> rule_hits;

  nlohmann::json to_json() const;
};

// Deterministic chat-completions server. Nodes are path prefixes on one port: a base URL of
// http://host:port/a serves node "/a" at /a/v1/chat/completions. Counters are exposed at
// GET /_mock/stats and cleared by POST /_mock/reset.
class MockTeacherServer {
 public:
  explicit MockTeacherServer(Scenario scenario, int worker_threads = 64);
  ~MockTeacherServer();
  MockTeacherServer(const MockTeacherServer&) = delete;
  MockTeacherServer& operator=(const MockTeacherServer&) = delete;

  // Binds and serves on a background thread; port 0 picks a free port. Returns the port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Binds and serves on the calling thread until stop().
  void serve(const std::string& host, int port);
  void stop();

  int port() const;
  std::string base_url(const std::string& node = "") const;

  MockStats stats() const;
  void reset_stats();
  void set_scenario(Scenario scenario);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cotforge::mock
