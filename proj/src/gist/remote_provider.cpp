#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include <chrono>
#include <cstdlib>
#include <thread>

#include "gist/captions.hpp"
#include "gist/error.hpp"

namespace gist {

RemoteProvider::RemoteProvider(RemoteConfig config) : config_(std::move(config)) {
  if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
}

std::string RemoteProvider::complete(const CompletionRequest& request) {
  json body = {{"model", config_.model},
               {"messages", json::array({{{"role", "user"}, {"content", request.prompt}}})},
               {"temperature", request.sampling.temperature},
               {"top_p", request.sampling.top_p},
               {"max_tokens", request.sampling.max_tokens},
               {"seed", request.sample}};
  const std::string payload = body.dump();

  httplib::Client client(config_.base_url);
  const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  std::string last_error;
  for (std::size_t attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      const double wait = config_.backoff_seconds * static_cast<double>(1u << (attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    }
    auto res = client.Post(config_.path, headers, payload, "application/json");
    if (!config_.log_dir.empty()) {
      json entry = {{"timestamp", utc_timestamp()},
                    {"request", body},
                    {"status", res ? res->status : -1},
                    {"response", res ? res->body : httplib::to_string(res.error())}};
      append_line(config_.log_dir / "remote_log.jsonl", entry.dump());
    }
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw Error(ErrorCode::provider, "completion endpoint returned HTTP " +
                                           std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    try {
      const auto reply = json::parse(res->body);
      const auto& choice = reply.at("choices").at(0);
      if (choice.contains("message")) return choice.at("message").at("content").get<std::string>();
      return choice.at("text").get<std::string>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::provider, std::string("malformed completion response: ") + e.what());
    }
  }
  throw Error(ErrorCode::provider, "completion request failed after " +
                                       std::to_string(config_.max_retries + 1) + " attempts (" +
                                       last_error + ")");
}

}  // namespace gist
