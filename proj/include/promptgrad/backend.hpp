#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptgrad/errors.hpp"

namespace promptgrad {

enum class ModelRole { kForward, kBackward, kOptimizer };
enum class Phase { kForward, kBackward, kPropose, kValidate };

const char* to_string(ModelRole role);
const char* to_string(Phase phase);
ModelRole model_role_from_string(const std::string& s);

struct GenerationParams {
  double temperature = 0.0;
  double top_p = 0.99;
  int max_tokens = 2000;
  std::optional<std::string> stop;
};

struct ModelRequest {
  ModelRole role = ModelRole::kForward;
  Phase phase = Phase::kForward;
  std::string system_text;
  std::string user_text;
  GenerationParams params;
};

struct TokenUsage {
  long long prompt_tokens = 0;
  long long completion_tokens = 0;
};

struct ModelResponse {
  std::string text;
  TokenUsage usage;
  double latency_ms = 0.0;
};

/// Per-backend request/token counters partitioned by role and phase.
/// Counters are monotone within a run; report totals equal the sum of entries.
class UsageLedger {
 public:
  struct Counters {
    long long requests = 0;
    long long prompt_tokens = 0;
    long long completion_tokens = 0;
  };

  void add(ModelRole role, Phase phase, const TokenUsage& usage);
  Counters total() const;
  Counters by_role(ModelRole role) const;
  Counters by_phase(Phase phase) const;
  nlohmann::json to_json() const;
  void reset();

 private:
  mutable std::mutex mutex_;
  std::map<std::pair<int, int>, Counters> cells_;
};

class ModelBackend {
 public:
  virtual ~ModelBackend() = default;
  virtual ModelResponse complete(const ModelRequest& request) = 0;
};

/// One scripted response rule. Matchers are evaluated in file order and the
/// first entry whose substrings all occur in the request's user text wins.
struct ScriptEntry {
  ModelRole role = ModelRole::kForward;
  std::vector<std::string> match;
  std::string response;
  std::optional<int> max_uses;
  int uses = 0;
};

/// Deterministic backend driven by a script: a pure function of the script
/// and the request sequence. Unmatched requests fail loudly with the request
/// digest so fixtures can be repaired.
class ScriptedBackend : public ModelBackend {
 public:
  explicit ScriptedBackend(std::vector<ScriptEntry> entries, UsageLedger* ledger = nullptr);
  static std::vector<ScriptEntry> load_jsonl_file(const std::string& path);
  static std::vector<ScriptEntry> parse_jsonl(const std::string& text);

  ModelResponse complete(const ModelRequest& request) override;

 private:
  std::vector<ScriptEntry> entries_;
  UsageLedger* ledger_;
  std::mutex mutex_;
};

/// Whitespace-token count; the synthetic usage measure for scripted runs.
long long count_tokens(const std::string& text);

/// Retry wrapper used by the backward engine and optimizer: `retries`
/// additional attempts with jittered backoff before the error escapes.
ModelResponse complete_with_retries(ModelBackend& backend, const ModelRequest& request,
                                    int retries = 2, double base_backoff_ms = 50.0,
                                    uint64_t jitter_seed = 0);

}  // namespace promptgrad
