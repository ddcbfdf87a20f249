#include <httplib.h>

#include "cotforge/gateway.hpp"

namespace cotforge::gateway {

namespace {

struct SplitUrl {
  std::string scheme_host_port;
  std::string path_prefix;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto slash = url.find('/', host_start);
  SplitUrl out;
  out.scheme_host_port = url.substr(0, slash);
  if (slash != std::string::npos) out.path_prefix = url.substr(slash);
  while (!out.path_prefix.empty() && out.path_prefix.back() == '/') out.path_prefix.pop_back();
  return out;
}

class HttpTransport final : public Transport {
 public:
  HttpResponse post_json(const std::string& base_url, const std::string& path,
                         const std::string& body, const Headers& headers,
                         std::chrono::milliseconds timeout) override {
    const auto url = split_url(base_url);
    httplib::Client client(url.scheme_host_port);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    client.set_keep_alive(false);
    httplib::Headers h(headers.begin(), headers.end());
    auto res = client.Post(url.path_prefix + path, h, body, "application/json");
    HttpResponse out;
    if (!res) {
      out.error = httplib::to_string(res.error());
      return out;
    }
    out.status = res->status;
    out.body = std::move(res->body);
    return out;
  }
};

}  // namespace

std::shared_ptr<Transport> make_http_transport() { return std::make_shared<HttpTransport>(); }

}  // namespace cotforge::gateway
