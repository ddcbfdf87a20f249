#include <doctest.h>

#include <httplib.h>

#include "cotforge/gateway.hpp"
#include "cotforge/mock_server.hpp"
#include "helpers.hpp"

using namespace cotforge;
using nlohmann::json;

namespace {

gateway::ChatRequest chat(const std::string& teacher, const std::string& text, double temperature = 0.0) {
  gateway::ChatRequest r;
  r.teacher_id = teacher;
  r.messages = {{"user", text}};
  r.temperature = temperature;
  return r;
}

gateway::TeacherEndpoint teacher(const std::string& id, std::vector<std::string> nodes, int attempts = 1) {
  gateway::TeacherEndpoint ep;
  ep.teacher_id = id;
  ep.node_urls = std::move(nodes);
  ep.retry.max_attempts = attempts;
  ep.retry.backoff_base = std::chrono::milliseconds(0);
  ep.request_timeout = std::chrono::milliseconds(5000);
  return ep;
}

}  // namespace

TEST_CASE("scenario JSON round-trips") {
  json j = {{"rules",
             {{{"name", "r1"},
               {"match", {{"node", "/a"}, {"model", "m"}, {"temperature", 1.0}, {"contains", {"x", "y"}}}},
               {"action", "fail"},
               {"status", 502},
               {"delay_ms", 5},
               {"times", 2},
               {"after_calls", 1}}}},
            {"fallback", {{"content", "default"}}}};
  auto s = mock::Scenario::from_json(j);
  REQUIRE(s.rules.size() == 1);
  CHECK(s.rules[0].match.contains.size() == 2);
  CHECK(s.rules[0].times == 2);
  CHECK(s.fallback.content == "default");
  auto again = mock::Scenario::from_json(s.to_json());
  CHECK(again.to_json() == s.to_json());
  CHECK_THROWS(mock::Scenario::from_json(json{{"rules", {{{"action", "explode"}}}}}));
}

TEST_CASE("rules match in order with limits") {
  json scenario = {
      {"rules",
       {{{"name", "hot"}, {"match", {{"temperature", 1.0}}}, {"content", "warm reply"}},
        {{"name", "once"}, {"match", {{"contains", "ping"}}}, {"content", "first pong"}, {"times", 1}},
        {{"name", "again"}, {"match", {{"contains", "ping"}}}, {"content", "later pong"}},
        {{"name", "late"}, {"after_calls", 5}, {"content", "late reply"}},
        {{"name", "model-b"}, {"match", {{"model", "b"}}}, {"content", "b reply"}}}},
      {"fallback", {{"content", "fallback reply"}}}};
  auto server = testing::start_mock(scenario);
  gateway::GatewayPool pool(gateway::make_http_transport());
  pool.register_teacher(teacher("a", {server->base_url()}));
  pool.register_teacher(teacher("b", {server->base_url()}));

  CHECK(pool.submit_chat(chat("a", "ping")).content == "first pong");
  CHECK(pool.submit_chat(chat("a", "ping")).content == "later pong");
  CHECK(pool.submit_chat(chat("a", "x", 1.0)).content == "warm reply");
  CHECK(pool.submit_chat(chat("b", "x")).content == "b reply");
  CHECK(pool.submit_chat(chat("a", "x")).content == "fallback reply");
  CHECK(pool.submit_chat(chat("a", "x")).content == "late reply");

  auto stats = server->stats();
  CHECK(stats.total_calls == 6);
  CHECK(stats.rule_hits["once"] == 1);
  CHECK(stats.rule_hits["fallback"] == 1);
  CHECK(stats.in_flight == 0);

  server->reset_stats();
  CHECK(server->stats().total_calls == 0);
  CHECK(pool.submit_chat(chat("a", "ping")).content == "first pong");
}

TEST_CASE("completion shape and usage") {
  auto server = testing::start_mock({{"fallback", {{"content", "two words"}}}});
  httplib::Client client("127.0.0.1", server->port());
  auto res = client.Post("/n1/v1/chat/completions",
                         R"({"model":"m","messages":[{"role":"user","content":"a b c"}]})",
                         "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  auto body = json::parse(res->body);
  CHECK(body["choices"][0]["message"]["content"] == "two words");
  CHECK(body["usage"]["prompt_tokens"] == 3);
  CHECK(body["usage"]["completion_tokens"] == 2);
  CHECK(body["model"] == "m");

  auto bad = client.Post("/v1/chat/completions", "{nope", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);

  auto stats = client.Get("/_mock/stats");
  REQUIRE(stats);
  auto sj = json::parse(stats->body);
  CHECK(sj["nodes"]["/n1"]["calls"] == 1);
  auto reset = client.Post("/_mock/reset", "", "application/json");
  REQUIRE(reset);
  CHECK(server->stats().total_calls == 0);
}

TEST_CASE("scripted node failure drives gateway failover") {
  json scenario = {{"rules", {{{"name", "down"}, {"match", {{"node", "/a"}}}, {"action", "fail"}, {"status", 503}}}},
                   {"fallback", {{"content", "ok"}}}};
  auto server = testing::start_mock(scenario);
  gateway::GatewayPool pool(gateway::make_http_transport());
  pool.register_teacher(teacher("t", {server->base_url("/a"), server->base_url("/b")}, 2));
  auto res = pool.submit_chat(chat("t", "x"));
  CHECK(res.content == "ok");
  CHECK(res.node_url == server->base_url("/b"));
  CHECK(pool.stats().teachers.at("t").retries == 1);
  CHECK(server->stats().nodes.at("/a").failures == 1);
}

TEST_CASE("timeouts count as failed attempts") {
  json scenario = {{"rules", {{{"match", {{"node", "/slow"}}}, {"content", "late"}, {"delay_ms", 400}}}},
                   {"fallback", {{"content", "fast"}}}};
  auto server = testing::start_mock(scenario);
  gateway::GatewayPool pool(gateway::make_http_transport());
  auto ep = teacher("t", {server->base_url("/slow"), server->base_url("/fast")}, 2);
  ep.request_timeout = std::chrono::milliseconds(100);
  pool.register_teacher(ep);
  auto res = pool.submit_chat(chat("t", "x"));
  CHECK(res.content == "fast");
  CHECK(res.attempts == 2);
}

TEST_CASE("unreachable node is a transport failure") {
  gateway::GatewayPool pool(gateway::make_http_transport());
  auto ep = teacher("t", {"http://127.0.0.1:1"}, 2);
  ep.request_timeout = std::chrono::milliseconds(500);
  pool.register_teacher(ep);
  CHECK_THROWS_AS(pool.submit_chat(chat("t", "x")), gateway::TransportError);
}
