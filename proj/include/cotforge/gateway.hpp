#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotforge::gateway {

class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// All attempts for a logical request failed; what() carries the last cause.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds backoff_base{200};
};

struct TeacherEndpoint {
  std::string teacher_id;
  // Model name sent on the wire; defaults to teacher_id when empty.
  std::string model;
  std::vector<std::string> node_urls;
  int max_in_flight_per_node = 4;
  std::chrono::milliseconds request_timeout{600'000};
  RetryPolicy retry;
  // Overrides the TEACHER_TOKEN_<ID> environment variable when non-empty.
  std::string bearer_token;
};

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::string teacher_id;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_output_tokens = 4096;
};

struct Usage {
  long long prompt_tokens = 0;
  long long completion_tokens = 0;
  long long total_tokens = 0;
};

struct CompletionResult {
  std::string content;
  Usage usage;
  std::string node_url;
  int attempts = 1;
};

struct HttpResponse {
  int status = 0;
  std::string body;
  // Non-empty when no HTTP response was received (connect failure, timeout).
  std::string error;
};

using Headers = std::multimap<std::string, std::string>;

// Blocking JSON POST; implementations must be safe for concurrent use.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post_json(const std::string& base_url, const std::string& path,
                                 const std::string& body, const Headers& headers,
                                 std::chrono::milliseconds timeout) = 0;
};

std::shared_ptr<Transport> make_http_transport();

struct NodeStats {
  std::string url;
  long long in_flight = 0;
  long long attempts = 0;
  double saturation = 0.0;
};

struct TeacherStats {
  long long requests_sent = 0;
  long long successes = 0;
  long long retries = 0;
  long long failures = 0;
  long long in_flight = 0;
  bool active = false;
  // Current node set only; drained nodes are dropped from the snapshot.
  std::vector<NodeStats> nodes;
};

struct GatewayStats {
  std::map<std::string, TeacherStats> teachers;
};

// Environment variable holding the bearer token for a teacher: TEACHER_TOKEN_<ID>, with the
// id upper-cased and every non-alphanumeric character replaced by '_'.
std::string token_env_var(const std::string& teacher_id);

std::string build_request_body(const ChatRequest& request, const std::string& model);
CompletionResult parse_completion_body(const std::string& body);

void validate_request(const ChatRequest& request);

// Client pool over per-teacher inference nodes. Dispatch goes to the least-in-flight node
// below its cap (ties round-robin); retries prefer nodes not yet tried for the request.
class GatewayPool {
 public:
  explicit GatewayPool(std::shared_ptr<Transport> transport = make_http_transport());
  ~GatewayPool();
  GatewayPool(const GatewayPool&) = delete;
  GatewayPool& operator=(const GatewayPool&) = delete;

  void register_teacher(TeacherEndpoint endpoint);
  bool has_teacher(const std::string& teacher_id) const;
  std::vector<std::string> teacher_ids() const;

  // Blocks until a node slot is free and the request completes or exhausts its attempts.
  CompletionResult submit_chat(const ChatRequest& request);

  // In-flight requests on removed nodes run to completion. An empty list deactivates the
  // teacher.
  void resize_pool(const std::string& teacher_id, const std::vector<std::string>& node_urls);

  GatewayStats stats() const;

 private:
  struct Node;
  struct Teacher;
  Teacher& teacher(const std::string& teacher_id) const;

  std::shared_ptr<Transport> transport_;
  mutable std::mutex mutex_;
  std::map<std::string, std::unique_ptr<Teacher>> teachers_;
};

}  // namespace cotforge::gateway
