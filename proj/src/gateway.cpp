#include "cotforge/gateway.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <condition_variable>
#include <cstdlib>
#include <random>
#include <set>
#include <thread>

namespace cotforge::gateway {

using nlohmann::json;

struct GatewayPool::Node {
  explicit Node(std::string u) : url(std::move(u)) {}
  std::string url;
  long long in_flight = 0;  // guarded by Teacher::mutex
  std::atomic<long long> attempts{0};
};

struct GatewayPool::Teacher {
  TeacherEndpoint endpoint;
  mutable std::mutex mutex;
  std::condition_variable slot_freed;
  std::vector<std::shared_ptr<Node>> nodes;
  std::size_t cursor = 0;

  std::atomic<long long> requests_sent{0};
  std::atomic<long long> successes{0};
  std::atomic<long long> retries{0};
  std::atomic<long long> failures{0};
  std::atomic<long long> in_flight{0};

  // Waits for a node below its cap. Untried nodes win over tried ones; among equals the
  // least loaded wins, ties resolved round-robin from the cursor.
  std::shared_ptr<Node> acquire(const std::set<std::string>& tried) {
    std::unique_lock lock(mutex);
    for (;;) {
      if (nodes.empty()) {
        throw ConfigurationError("teacher \"" + endpoint.teacher_id + "\" is inactive (no nodes)");
      }
      const std::size_t n = nodes.size();
      std::size_t best = n;
      for (std::size_t step = 0; step < n; ++step) {
        const std::size_t i = (cursor + step) % n;
        const auto& node = nodes[i];
        if (node->in_flight >= endpoint.max_in_flight_per_node) continue;
        if (best == n) {
          best = i;
          continue;
        }
        const bool fresh = !tried.count(node->url);
        const bool best_fresh = !tried.count(nodes[best]->url);
        if ((fresh && !best_fresh) ||
            (fresh == best_fresh && node->in_flight < nodes[best]->in_flight)) {
          best = i;
        }
      }
      if (best != n) {
        cursor = (best + 1) % n;
        auto node = nodes[best];
        ++node->in_flight;
        return node;
      }
      slot_freed.wait(lock);
    }
  }

  void release(const std::shared_ptr<Node>& node) {
    {
      std::lock_guard lock(mutex);
      --node->in_flight;
    }
    slot_freed.notify_all();
  }
};

std::string token_env_var(const std::string& teacher_id) {
  std::string name = "TEACHER_TOKEN_";
  for (unsigned char c : teacher_id) {
    name.push_back(std::isalnum(c) ? static_cast<char>(std::toupper(c)) : '_');
  }
  return name;
}

void validate_request(const ChatRequest& request) {
  if (request.messages.empty()) throw std::invalid_argument("chat request has no messages");
  const auto& first = request.messages.front().role;
  if (first != "system" && first != "user") {
    throw std::invalid_argument("first chat message must have role system or user");
  }
  if (!(request.temperature >= 0.0)) throw std::invalid_argument("temperature must be >= 0");
}

std::string build_request_body(const ChatRequest& request, const std::string& model) {
  json messages = json::array();
  for (const auto& m : request.messages) {
    messages.push_back({{"role", m.role}, {"content", m.content}});
  }
  return json{{"model", model},
              {"messages", std::move(messages)},
              {"temperature", request.temperature},
              {"max_tokens", request.max_output_tokens}}
      .dump();
}

CompletionResult parse_completion_body(const std::string& body) {
  json j = json::parse(body);  // throws on malformed bodies
  const auto& choices = j.at("choices");
  if (!choices.is_array() || choices.empty()) throw std::runtime_error("response has no choices");
  const auto& content = choices.at(0).at("message").at("content");
  if (!content.is_string()) throw std::runtime_error("choices[0].message.content is not a string");
  CompletionResult r;
  r.content = content.get<std::string>();
  if (auto it = j.find("usage"); it != j.end() && it->is_object()) {
    r.usage.prompt_tokens = it->value("prompt_tokens", 0LL);
    r.usage.completion_tokens = it->value("completion_tokens", 0LL);
    r.usage.total_tokens = it->value("total_tokens", r.usage.prompt_tokens + r.usage.completion_tokens);
  }
  return r;
}

GatewayPool::GatewayPool(std::shared_ptr<Transport> transport) : transport_(std::move(transport)) {}

GatewayPool::~GatewayPool() = default;

void GatewayPool::register_teacher(TeacherEndpoint endpoint) {
  if (endpoint.teacher_id.empty()) throw ConfigurationError("teacher_id must be non-empty");
  if (endpoint.max_in_flight_per_node < 1) {
    throw ConfigurationError("max_in_flight_per_node must be >= 1 for " + endpoint.teacher_id);
  }
  if (endpoint.retry.max_attempts < 1) {
    throw ConfigurationError("retry.max_attempts must be >= 1 for " + endpoint.teacher_id);
  }
  if (endpoint.model.empty()) endpoint.model = endpoint.teacher_id;
  auto t = std::make_unique<Teacher>();
  for (const auto& url : endpoint.node_urls) t->nodes.push_back(std::make_shared<Node>(url));
  t->endpoint = std::move(endpoint);
  std::lock_guard lock(mutex_);
  const std::string id = t->endpoint.teacher_id;
  if (teachers_.count(id)) throw ConfigurationError("teacher \"" + id + "\" registered twice");
  teachers_.emplace(id, std::move(t));
}

bool GatewayPool::has_teacher(const std::string& teacher_id) const {
  std::lock_guard lock(mutex_);
  return teachers_.count(teacher_id) > 0;
}

std::vector<std::string> GatewayPool::teacher_ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : teachers_) ids.push_back(id);
  return ids;
}

GatewayPool::Teacher& GatewayPool::teacher(const std::string& teacher_id) const {
  std::lock_guard lock(mutex_);
  auto it = teachers_.find(teacher_id);
  if (it == teachers_.end()) {
    throw ConfigurationError("unknown teacher_id \"" + teacher_id + "\"");
  }
  return *it->second;
}

CompletionResult GatewayPool::submit_chat(const ChatRequest& request) {
  Teacher& t = teacher(request.teacher_id);
  validate_request(request);
  const auto& ep = t.endpoint;
  const std::string body = build_request_body(request, ep.model);
  Headers headers;
  if (!ep.bearer_token.empty()) {
    headers.emplace("Authorization", "Bearer " + ep.bearer_token);
  } else if (const char* token = std::getenv(token_env_var(ep.teacher_id).c_str()); token && *token) {
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }

  ++t.requests_sent;
  std::set<std::string> tried;
  std::string last_error;
  thread_local std::mt19937_64 jitter{std::random_device{}()};

  for (int attempt = 0; attempt < ep.retry.max_attempts; ++attempt) {
    if (attempt > 0) {
      ++t.retries;
      const auto cap = ep.retry.backoff_base.count() * (1LL << std::min(attempt - 1, 20));
      if (cap > 0) {
        std::uniform_int_distribution<long long> dist(0, cap);
        std::this_thread::sleep_for(std::chrono::milliseconds(dist(jitter)));
      }
    }
    std::shared_ptr<Node> node;
    try {
      node = t.acquire(tried);
    } catch (...) {
      ++t.failures;
      throw;
    }
    tried.insert(node->url);
    ++node->attempts;
    ++t.in_flight;
    HttpResponse resp;
    try {
      resp = transport_->post_json(node->url, "/v1/chat/completions", body, headers,
                                   ep.request_timeout);
    } catch (const std::exception& e) {
      resp.error = e.what();
    }
    --t.in_flight;
    t.release(node);

    if (!resp.error.empty()) {
      last_error = node->url + ": " + resp.error;
      continue;
    }
    if (resp.status < 200 || resp.status >= 300) {
      last_error = node->url + ": HTTP " + std::to_string(resp.status) + ": " +
                   resp.body.substr(0, 200);
      continue;
    }
    try {
      CompletionResult result = parse_completion_body(resp.body);
      result.node_url = node->url;
      result.attempts = attempt + 1;
      ++t.successes;
      return result;
    } catch (const std::exception& e) {
      last_error = node->url + ": invalid completion body: " + e.what();
    }
  }
  ++t.failures;
  throw TransportError("teacher \"" + ep.teacher_id + "\": " +
                       std::to_string(ep.retry.max_attempts) +
                       " attempt(s) exhausted; last error: " + last_error);
}

void GatewayPool::resize_pool(const std::string& teacher_id,
                              const std::vector<std::string>& node_urls) {
  Teacher& t = teacher(teacher_id);
  {
    std::lock_guard lock(t.mutex);
    std::vector<std::shared_ptr<Node>> next;
    for (const auto& url : node_urls) {
      auto it = std::find_if(t.nodes.begin(), t.nodes.end(),
                             [&](const auto& n) { return n->url == url; });
      next.push_back(it != t.nodes.end() ? *it : std::make_shared<Node>(url));
    }
    t.nodes = std::move(next);
    t.endpoint.node_urls = node_urls;
    t.cursor = 0;
  }
  t.slot_freed.notify_all();
}

GatewayStats GatewayPool::stats() const {
  GatewayStats out;
  std::lock_guard lock(mutex_);
  for (const auto& [id, t] : teachers_) {
    TeacherStats s;
    // Outcomes are read before requests_sent so successes + failures <= requests_sent.
    s.successes = t->successes.load();
    s.failures = t->failures.load();
    s.retries = t->retries.load();
    s.requests_sent = t->requests_sent.load();
    s.in_flight = t->in_flight.load();
    std::lock_guard tl(t->mutex);
    s.active = !t->nodes.empty();
    for (const auto& n : t->nodes) {
      NodeStats ns;
      ns.url = n->url;
      ns.in_flight = n->in_flight;
      ns.attempts = n->attempts.load();
      ns.saturation = static_cast<double>(n->in_flight) / t->endpoint.max_in_flight_per_node;
      s.nodes.push_back(std::move(ns));
    }
    out.teachers.emplace(id, std::move(s));
  }
  return out;
}

}  // namespace cotforge::gateway
