#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <thread>

#include "distillery/teacher.hpp"

namespace distillery::teacher {

namespace {

using nlohmann::json;

bool is_transient_status(int status) { return status == 429 || (status >= 500 && status <= 599); }

}  // namespace

HttpTeacher::HttpTeacher(HttpTeacherConfig config) : config_(std::move(config)) {
  if (config_.api_key.empty()) {
    throw Error(ErrorKind::credential_missing, std::string("set ") + kApiKeyEnv);
  }
  if (config_.max_retries < 0) throw Error(ErrorKind::precondition, "max_retries must be >= 0");
  // "scheme://host[:port]/path" -> client base + request path
  const auto scheme_end = config_.endpoint.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorKind::config, "endpoint must be an absolute URL: " + config_.endpoint);
  }
  const auto path_start = config_.endpoint.find('/', scheme_end + 3);
  if (path_start == std::string::npos) {
    scheme_host_port_ = config_.endpoint;
    path_ = "/";
  } else {
    scheme_host_port_ = config_.endpoint.substr(0, path_start);
    path_ = config_.endpoint.substr(path_start);
  }
  if (!config_.sleeper) {
    config_.sleeper = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }
}

std::unique_ptr<HttpTeacher> HttpTeacher::from_environment(std::string endpoint) {
  const char* key = std::getenv(kApiKeyEnv);
  HttpTeacherConfig cfg;
  if (!endpoint.empty()) cfg.endpoint = std::move(endpoint);
  cfg.api_key = key ? key : "";
  return std::make_unique<HttpTeacher>(std::move(cfg));
}

TeacherReply HttpTeacher::do_send(std::span<const ChatMessage> conversation,
                                  const GenerationParams& params) {
  json body;
  body["model"] = params.model;
  body["temperature"] = params.temperature;
  body["max_tokens"] = params.max_completion_tokens;
  body["messages"] = json::array();
  for (const auto& m : conversation) {
    body["messages"].push_back({{"role", to_string(m.role)}, {"content", m.content}});
  }
  const std::string payload = body.dump();

  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(config_.request_timeout);
  client.set_read_timeout(config_.request_timeout);
  client.set_write_timeout(config_.request_timeout);
  const httplib::Headers headers{{"Authorization", "Bearer " + config_.api_key}};

  std::string last_failure;
  auto backoff = config_.initial_backoff;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      spdlog::warn("teacher request failed ({}); retry {}/{} in {} ms", last_failure, attempt,
                   config_.max_retries, backoff.count());
      config_.sleeper(backoff);
      backoff *= 2;
    }
    ++attempts_;
    auto res = client.Post(path_, headers, payload, "application/json");
    if (!res) {
      last_failure = httplib::to_string(res.error());
      continue;
    }
    if (is_transient_status(res->status)) {
      last_failure = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      throw Error(ErrorKind::endpoint_rejected,
                  "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 500));
    }

    TeacherReply reply;
    try {
      const auto j = json::parse(res->body);
      reply.content = j.at("choices").at(0).at("message").at("content").get<std::string>();
      const auto u = j.find("usage");
      if (u != j.end() && u->is_object() && u->contains("prompt_tokens") &&
          u->contains("completion_tokens")) {
        reply.usage.prompt_tokens = u->at("prompt_tokens").get<std::uint64_t>();
        reply.usage.completion_tokens = u->at("completion_tokens").get<std::uint64_t>();
      } else {
        for (const auto& m : conversation) reply.usage.prompt_tokens += estimate_tokens(m.content);
        reply.usage.completion_tokens = estimate_tokens(reply.content);
        reply.usage.estimated = true;
      }
    } catch (const json::exception& e) {
      throw Error(ErrorKind::malformed_endpoint_response, e.what());
    }
    return reply;
  }
  throw Error(ErrorKind::exhausted_retries,
              std::to_string(config_.max_retries + 1) + " attempts, last: " + last_failure);
}

}  // namespace distillery::teacher
