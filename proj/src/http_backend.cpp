#include "promptgrad/http_backend.hpp"

#include <chrono>
#include <cstdlib>

#include <httplib.h>

namespace promptgrad {

HttpBackendConfig HttpBackendConfig::from_json(const nlohmann::json& j) {
  HttpBackendConfig c;
  if (j.contains("base_url")) c.base_url = j["base_url"].get<std::string>();
  if (j.contains("path")) c.path = j["path"].get<std::string>();
  if (j.contains("model")) c.model = j["model"].get<std::string>();
  if (j.contains("api_key_env")) c.api_key_env = j["api_key_env"].get<std::string>();
  if (j.contains("timeout_seconds")) c.timeout_seconds = j["timeout_seconds"].get<int>();
  if (j.contains("retries")) c.retries = j["retries"].get<int>();
  return c;
}

HttpChatBackend::HttpChatBackend(HttpBackendConfig config, UsageLedger* ledger)
    : config_(std::move(config)), ledger_(ledger) {}

ModelResponse HttpChatBackend::complete_once(const ModelRequest& request) {
  httplib::Client client(config_.base_url);
  client.set_read_timeout(config_.timeout_seconds, 0);
  client.set_connection_timeout(config_.timeout_seconds, 0);

  httplib::Headers headers;
  if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
    headers.emplace("Authorization", std::string("Bearer ") + key);

  nlohmann::json body{
      {"model", config_.model},
      {"messages",
       {{{"role", "system"}, {"content", request.system_text}},
        {{"role", "user"}, {"content", request.user_text}}}},
      {"temperature", request.params.temperature},
      {"top_p", request.params.top_p},
      {"max_tokens", request.params.max_tokens},
  };
  if (request.params.stop) body["stop"] = *request.params.stop;

  auto start = std::chrono::steady_clock::now();
  auto result = client.Post(config_.path, headers, body.dump(), "application/json");
  if (!result)
    throw BackendError("chat-completions transport error: " + httplib::to_string(result.error()));
  if (result->status >= 400)
    throw BackendError("chat-completions HTTP " + std::to_string(result->status) + ": " +
                       result->body.substr(0, 500));

  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(result->body);
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("chat-completions bad response body: ") + e.what());
  }

  ModelResponse resp;
  try {
    resp.text = parsed.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("chat-completions response missing content: ") + e.what());
  }
  if (parsed.contains("usage")) {
    resp.usage.prompt_tokens = parsed["usage"].value("prompt_tokens", 0LL);
    resp.usage.completion_tokens = parsed["usage"].value("completion_tokens", 0LL);
  } else {
    resp.usage.prompt_tokens = count_tokens(request.system_text) + count_tokens(request.user_text);
    resp.usage.completion_tokens = count_tokens(resp.text);
  }
  resp.latency_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - start).count();
  if (ledger_) ledger_->add(request.role, request.phase, resp.usage);
  return resp;
}

ModelResponse HttpChatBackend::complete(const ModelRequest& request) {
  struct Once : ModelBackend {
    HttpChatBackend* self;
    explicit Once(HttpChatBackend* s) : self(s) {}
    ModelResponse complete(const ModelRequest& r) override { return self->complete_once(r); }
  } once{this};
  return complete_with_retries(once, request, config_.retries);
}

}  // namespace promptgrad
