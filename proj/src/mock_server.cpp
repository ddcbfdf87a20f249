#include "cotforge/mock_server.hpp"

#include <httplib.h>

#include <cmath>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "cotforge/io.hpp"
#include "cotforge/record.hpp"

namespace cotforge::mock {

using nlohmann::json;

namespace {

Rule rule_from_json(const json& j, const std::string& default_name) {
  Rule r;
  r.name = j.value("name", default_name);
  if (auto m = j.find("match"); m != j.end()) {
    if (m->contains("node")) r.match.node = m->at("node").get<std::string>();
    if (m->contains("model")) r.match.model = m->at("model").get<std::string>();
    if (m->contains("temperature")) r.match.temperature = m->at("temperature").get<double>();
    if (auto c = m->find("contains"); c != m->end()) {
      if (c->is_string()) {
        r.match.contains.push_back(c->get<std::string>());
      } else {
        r.match.contains = c->get<std::vector<std::string>>();
      }
    }
  }
  const auto action = j.value("action", std::string("respond"));
  if (action == "respond") {
    r.action = Action::respond;
  } else if (action == "fail") {
    r.action = Action::fail;
  } else {
    throw std::invalid_argument("rule \"" + r.name + "\": unknown action \"" + action + "\"");
  }
  r.content = j.value("content", std::string());
  r.status = j.value("status", 500);
  r.delay_ms = j.value("delay_ms", 0);
  if (j.contains("times")) r.times = j.at("times").get<long long>();
  if (j.contains("after_calls")) r.after_calls = j.at("after_calls").get<long long>();
  return r;
}

json rule_to_json(const Rule& r) {
  json m = json::object();
  if (r.match.node) m["node"] = *r.match.node;
  if (r.match.model) m["model"] = *r.match.model;
  if (r.match.temperature) m["temperature"] = *r.match.temperature;
  if (!r.match.contains.empty()) m["contains"] = r.match.contains;
  json j = {{"name", r.name},
            {"match", m},
            {"action", r.action == Action::respond ? "respond" : "fail"},
            {"content", r.content},
            {"status", r.status},
            {"delay_ms", r.delay_ms}};
  if (r.times) j["times"] = *r.times;
  if (r.after_calls) j["after_calls"] = *r.after_calls;
  return j;
}

struct RequestView {
  std::string node;
  std::string model;
  double temperature = 0.0;
  std::string text;
};

bool matches(const Match& m, const RequestView& req) {
  if (m.node && *m.node != req.node) return false;
  if (m.model && *m.model != req.model) return false;
  if (m.temperature && std::fabs(*m.temperature - req.temperature) > 1e-9) return false;
  for (const auto& needle : m.contains) {
    if (req.text.find(needle) == std::string::npos) return false;
  }
  return true;
}

}  // namespace

Scenario Scenario::from_json(const json& j) {
  Scenario s;
  if (auto f = j.find("fallback"); f != j.end()) s.fallback = rule_from_json(*f, "fallback");
  if (auto rules = j.find("rules"); rules != j.end()) {
    for (std::size_t i = 0; i < rules->size(); ++i) {
      s.rules.push_back(rule_from_json(rules->at(i), "rule" + std::to_string(i)));
    }
  }
  return s;
}

Scenario Scenario::load(const std::filesystem::path& path) {
  return from_json(json::parse(read_file(path), nullptr, true, true));
}

json Scenario::to_json() const {
  json rules_json = json::array();
  for (const auto& r : rules) rules_json.push_back(rule_to_json(r));
  return {{"rules", rules_json}, {"fallback", rule_to_json(fallback)}};
}

json MockStats::to_json() const {
  json nodes_json = json::object();
  for (const auto& [name, c] : nodes) {
    nodes_json[name] = {{"calls", c.calls},
                        {"failures", c.failures},
                        {"in_flight", c.in_flight},
                        {"peak_in_flight", c.peak_in_flight}};
  }
  return {{"total_calls", total_calls},
          {"in_flight", in_flight},
          {"peak_in_flight", peak_in_flight},
          {"nodes", nodes_json},
          {"rule_hits", rule_hits}};
}

struct MockTeacherServer::Impl {
  Scenario scenario;
  std::vector<long long> rule_uses;
  MockStats stats;
  mutable std::mutex mutex;
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::string host = "127.0.0.1";
  long long response_seq = 0;

  void handle_chat(const httplib::Request& req, httplib::Response& res) {
    RequestView view;
    view.node = req.matches.size() > 1 ? req.matches[1].str() : std::string();
    try {
      json body = json::parse(req.body);
      view.model = body.value("model", std::string());
      view.temperature = body.value("temperature", 0.0);
      for (const auto& m : body.at("messages")) {
        if (!view.text.empty()) view.text += '\n';
        view.text += m.at("content").get<std::string>();
      }
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
      return;
    }

    Rule rule;
    long long seq = 0;
    {
      std::lock_guard lock(mutex);
      const long long call_index = stats.total_calls++;
      auto& node = stats.nodes[view.node];
      ++node.calls;
      node.peak_in_flight = std::max(node.peak_in_flight, ++node.in_flight);
      stats.peak_in_flight = std::max(stats.peak_in_flight, ++stats.in_flight);
      const Rule* chosen = &scenario.fallback;
      for (std::size_t i = 0; i < scenario.rules.size(); ++i) {
        const Rule& r = scenario.rules[i];
        if (r.after_calls && call_index < *r.after_calls) continue;
        if (r.times && rule_uses[i] >= *r.times) continue;
        if (!matches(r.match, view)) continue;
        ++rule_uses[i];
        chosen = &r;
        break;
      }
      ++stats.rule_hits[chosen->name];
      if (chosen->action == Action::fail) ++node.failures;
      rule = *chosen;
      seq = ++response_seq;
    }

    if (rule.delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(rule.delay_ms));

    if (rule.action == Action::fail) {
      res.status = rule.status;
      res.set_content(json{{"error", {{"message", "scripted failure: " + rule.name}}}}.dump(),
                      "application/json");
    } else {
      const long long prompt_tokens = count_tokens(view.text);
      const long long completion_tokens = count_tokens(rule.content);
      json out = {
          {"id", "mock-" + std::to_string(seq)},
          {"object", "chat.completion"},
          {"model", view.model},
          {"choices",
           json::array({{{"index", 0},
                         {"message", {{"role", "assistant"}, {"content", rule.content}}},
                         {"finish_reason", "stop"}}})},
          {"usage",
           {{"prompt_tokens", prompt_tokens},
            {"completion_tokens", completion_tokens},
            {"total_tokens", prompt_tokens + completion_tokens}}}};
      res.status = 200;
      res.set_content(out.dump(), "application/json");
    }

    std::lock_guard lock(mutex);
    --stats.nodes[view.node].in_flight;
    --stats.in_flight;
  }
};

MockTeacherServer::MockTeacherServer(Scenario scenario, int worker_threads)
    : impl_(std::make_unique<Impl>()) {
  impl_->scenario = std::move(scenario);
  impl_->rule_uses.assign(impl_->scenario.rules.size(), 0);
  const std::size_t workers = static_cast<std::size_t>(std::max(1, worker_threads));
  impl_->server.new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
  impl_->server.Post(R"((.*)/v1/chat/completions)",
                     [this](const httplib::Request& req, httplib::Response& res) {
                       impl_->handle_chat(req, res);
                     });
  impl_->server.Get("/_mock/stats", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(stats().to_json().dump(), "application/json");
  });
  impl_->server.Post("/_mock/reset", [this](const httplib::Request&, httplib::Response& res) {
    reset_stats();
    res.set_content("{}", "application/json");
  });
}

MockTeacherServer::~MockTeacherServer() { stop(); }

int MockTeacherServer::start(const std::string& host, int port) {
  impl_->host = host;
  if (port == 0) {
    impl_->port = impl_->server.bind_to_any_port(host);
  } else {
    if (!impl_->server.bind_to_port(host, port)) {
      throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    }
    impl_->port = port;
  }
  if (impl_->port <= 0) throw std::runtime_error("cannot bind " + host);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->port;
}

void MockTeacherServer::serve(const std::string& host, int port) {
  impl_->host = host;
  if (!impl_->server.bind_to_port(host, port)) {
    throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->port = port;
  impl_->server.listen_after_bind();
}

void MockTeacherServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int MockTeacherServer::port() const { return impl_->port; }

std::string MockTeacherServer::base_url(const std::string& node) const {
  return "http://" + impl_->host + ":" + std::to_string(impl_->port) + node;
}

MockStats MockTeacherServer::stats() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->stats;
}

void MockTeacherServer::reset_stats() {
  std::lock_guard lock(impl_->mutex);
  MockStats fresh;
  fresh.in_flight = impl_->stats.in_flight;
  for (const auto& [name, c] : impl_->stats.nodes) {
    if (c.in_flight > 0) fresh.nodes[name].in_flight = c.in_flight;
  }
  impl_->stats = std::move(fresh);
  std::fill(impl_->rule_uses.begin(), impl_->rule_uses.end(), 0);
}

void MockTeacherServer::set_scenario(Scenario scenario) {
  std::lock_guard lock(impl_->mutex);
  impl_->scenario = std::move(scenario);
  impl_->rule_uses.assign(impl_->scenario.rules.size(), 0);
}

}  // namespace cotforge::mock
