#pragma once

#include <string>

#include "promptgrad/backend.hpp"

namespace promptgrad {

struct HttpBackendConfig {
  std::string base_url = "http://localhost:8000";  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4o";
  std::string api_key_env = "OPENAI_API_KEY";
  int timeout_seconds = 120;
  int retries = 2;

  static HttpBackendConfig from_json(const nlohmann::json& j);
};

/// OpenAI-style chat-completions client. Sends (system, user) messages with
/// the request's generation params; retries transport and 5xx failures with
/// jittered backoff.
class HttpChatBackend : public ModelBackend {
 public:
  explicit HttpChatBackend(HttpBackendConfig config, UsageLedger* ledger = nullptr);

  ModelResponse complete(const ModelRequest& request) override;

 private:
  ModelResponse complete_once(const ModelRequest& request);

  HttpBackendConfig config_;
  UsageLedger* ledger_;
};

}  // namespace promptgrad
