#include "promptgrad/backend.hpp"

#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include "promptgrad/param.hpp"

namespace promptgrad {

const char* to_string(ModelRole role) {
  switch (role) {
    case ModelRole::kForward: return "forward";
    case ModelRole::kBackward: return "backward";
    case ModelRole::kOptimizer: return "optimizer";
  }
  return "unknown";
}

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::kForward: return "forward";
    case Phase::kBackward: return "backward";
    case Phase::kPropose: return "propose";
    case Phase::kValidate: return "validate";
  }
  return "unknown";
}

ModelRole model_role_from_string(const std::string& s) {
  if (s == "forward") return ModelRole::kForward;
  if (s == "backward") return ModelRole::kBackward;
  if (s == "optimizer") return ModelRole::kOptimizer;
  throw ConfigError("unknown model role: " + s);
}

void UsageLedger::add(ModelRole role, Phase phase, const TokenUsage& usage) {
  std::lock_guard<std::mutex> lock(mutex_);
  auto& c = cells_[{static_cast<int>(role), static_cast<int>(phase)}];
  c.requests += 1;
  c.prompt_tokens += usage.prompt_tokens;
  c.completion_tokens += usage.completion_tokens;
}

UsageLedger::Counters UsageLedger::total() const {
  std::lock_guard<std::mutex> lock(mutex_);
  Counters t;
  for (const auto& [k, c] : cells_) {
    t.requests += c.requests;
    t.prompt_tokens += c.prompt_tokens;
    t.completion_tokens += c.completion_tokens;
  }
  return t;
}

UsageLedger::Counters UsageLedger::by_role(ModelRole role) const {
  std::lock_guard<std::mutex> lock(mutex_);
  Counters t;
  for (const auto& [k, c] : cells_) {
    if (k.first != static_cast<int>(role)) continue;
    t.requests += c.requests;
    t.prompt_tokens += c.prompt_tokens;
    t.completion_tokens += c.completion_tokens;
  }
  return t;
}

UsageLedger::Counters UsageLedger::by_phase(Phase phase) const {
  std::lock_guard<std::mutex> lock(mutex_);
  Counters t;
  for (const auto& [k, c] : cells_) {
    if (k.second != static_cast<int>(phase)) continue;
    t.requests += c.requests;
    t.prompt_tokens += c.prompt_tokens;
    t.completion_tokens += c.completion_tokens;
  }
  return t;
}

nlohmann::json UsageLedger::to_json() const {
  std::lock_guard<std::mutex> lock(mutex_);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, c] : cells_) {
    std::string key = std::string(to_string(static_cast<ModelRole>(k.first))) + "/" +
                      to_string(static_cast<Phase>(k.second));
    j[key] = {{"requests", c.requests},
              {"prompt_tokens", c.prompt_tokens},
              {"completion_tokens", c.completion_tokens}};
  }
  return j;
}

void UsageLedger::reset() {
  std::lock_guard<std::mutex> lock(mutex_);
  cells_.clear();
}

long long count_tokens(const std::string& text) {
  long long count = 0;
  bool in_token = false;
  for (char c : text) {
    bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r';
    if (!ws && !in_token) ++count;
    in_token = !ws;
  }
  return count;
}

ScriptedBackend::ScriptedBackend(std::vector<ScriptEntry> entries, UsageLedger* ledger)
    : entries_(std::move(entries)), ledger_(ledger) {}

std::vector<ScriptEntry> ScriptedBackend::parse_jsonl(const std::string& text) {
  std::vector<ScriptEntry> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("script line " + std::to_string(lineno) + ": " + e.what());
    }
    ScriptEntry e;
    e.role = model_role_from_string(j.at("role").get<std::string>());
    for (const auto& m : j.at("match")) e.match.push_back(m.get<std::string>());
    e.response = j.at("response").get<std::string>();
    if (j.contains("max_uses")) e.max_uses = j["max_uses"].get<int>();
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<ScriptEntry> ScriptedBackend::load_jsonl_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open script file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_jsonl(buf.str());
}

ModelResponse ScriptedBackend::complete(const ModelRequest& request) {
  std::lock_guard<std::mutex> lock(mutex_);
  for (auto& entry : entries_) {
    if (entry.role != request.role) continue;
    if (entry.max_uses && entry.uses >= *entry.max_uses) continue;
    bool all = true;
    for (const auto& needle : entry.match) {
      if (request.user_text.find(needle) == std::string::npos) {
        all = false;
        break;
      }
    }
    if (!all) continue;
    entry.uses += 1;
    ModelResponse resp;
    resp.text = entry.response;
    resp.usage.prompt_tokens = count_tokens(request.system_text) + count_tokens(request.user_text);
    resp.usage.completion_tokens = count_tokens(resp.text);
    if (ledger_) ledger_->add(request.role, request.phase, resp.usage);
    return resp;
  }
  std::ostringstream msg;
  msg << "unscripted request for role '" << to_string(request.role) << "' (digest "
      << std::hex << fnv1a64(request.system_text + "\n" + request.user_text) << std::dec
      << ", user_text starts: "
      << request.user_text.substr(0, std::min<size_t>(120, request.user_text.size())) << "...)";
  throw UnscriptedRequestError(msg.str());
}

ModelResponse complete_with_retries(ModelBackend& backend, const ModelRequest& request,
                                    int retries, double base_backoff_ms, uint64_t jitter_seed) {
  // Scripted failures are deterministic, so retrying an UnscriptedRequestError
  // would only mask broken fixtures; let it escape immediately.
  int attempt = 0;
  uint64_t state = jitter_seed ^ 0x9e3779b97f4a7c15ull;
  for (;;) {
    try {
      return backend.complete(request);
    } catch (const UnscriptedRequestError&) {
      throw;
    } catch (const BackendError&) {
      if (attempt >= retries) throw;
      state = state * 6364136223846793005ull + 1442695040888963407ull;
      double jitter = 0.5 + static_cast<double>(state >> 40) / (1ull << 24);  // [0.5, 1.5)
      auto wait = std::chrono::duration<double, std::milli>(
          base_backoff_ms * (1 << attempt) * jitter);
      std::this_thread::sleep_for(wait);
      ++attempt;
    }
  }
}

}  // namespace promptgrad
