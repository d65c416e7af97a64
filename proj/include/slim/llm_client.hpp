#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "slim/dataset.hpp"
#include "slim/prompts.hpp"

namespace slim {

/// Connection settings for an OpenAI-style endpoint (chat or embeddings).
struct EndpointConfig {
  std::string base_url;  // e.g. "http://127.0.0.1:8000/v1"
  std::string model_name;
  std::optional<std::string> api_key;
  std::string api_key_env = "OPENAI_API_KEY";
  int max_tokens = 300;
  double temperature = 0.0;
  std::chrono::milliseconds timeout{60'000};
  int max_retries = 3;
  std::chrono::milliseconds backoff_initial{500};
  double backoff_multiplier = 2.0;
  std::chrono::milliseconds backoff_max{20'000};

  void validate() const;
  /// Explicit key, else the environment variable named by api_key_env.
  std::optional<std::string> resolved_api_key() const;
};

struct HttpResponse {
  int status = 0;  // 0 = no response (connection failure, timeout)
  std::string body;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

/// Minimal POST transport so tests can substitute an instrumented double.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post(const std::string& url, const std::string& json_body,
                            const HttpHeaders& headers, std::chrono::milliseconds timeout) = 0;
};

std::shared_ptr<HttpTransport> make_http_transport();

/// True for statuses worth retrying: no response, 408, 429 and 5xx.
bool is_retryable_status(int status);

struct PostResult {
  nlohmann::json body;
  int retries = 0;
};

/// POSTs `{base_url}/{path}` with exponential backoff on retryable failures.
/// Throws TransportError when retries run out, EndpointError on other non-2xx.
PostResult post_json_with_retry(const EndpointConfig& cfg, HttpTransport& transport,
                                const std::string& path, const nlohmann::json& body);

struct ChatResult {
  std::string text;
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
  std::chrono::duration<double, std::milli> latency{0};
  int retries = 0;
};

ChatResult chat_complete(const EndpointConfig& cfg, HttpTransport& transport,
                         const std::string& prompt);

/// Anything that turns a prompt into generated text.
class TextGenerator {
 public:
  virtual ~TextGenerator() = default;
  virtual ChatResult generate(const std::string& prompt) = 0;
  virtual std::string model() const = 0;
};

class RemoteChatGenerator final : public TextGenerator {
 public:
  RemoteChatGenerator(EndpointConfig cfg, std::shared_ptr<HttpTransport> transport);
  ChatResult generate(const std::string& prompt) override;
  std::string model() const override { return cfg_.model_name; }

 private:
  EndpointConfig cfg_;
  std::shared_ptr<HttpTransport> transport_;
};

/// Deterministic stand-in for the teacher and student models.
///
/// Reads the numbered item lines of a prompt rendered by this library, picks the
/// majority category (ties → lexicographically first) and answers with a
/// three-step rationale whose last step names up to three catalog items of that
/// category that the prompt does not mention, in lexicographic title order.
class MockLlm {
 public:
  explicit MockLlm(ItemTable catalog);

  std::string respond(const std::string& prompt) const;

 private:
  ItemTable catalog_;
  std::map<std::string, std::vector<std::string>> titles_by_category_;  // sorted titles
};

class MockGenerator final : public TextGenerator {
 public:
  MockGenerator(std::shared_ptr<const MockLlm> llm, std::string model_name);
  ChatResult generate(const std::string& prompt) override;
  std::string model() const override { return model_; }

 private:
  std::shared_ptr<const MockLlm> llm_;
  std::string model_;
};

struct CacheEntry {
  std::string user;
  std::string prompt_hash;
  std::string model;
  std::string rationale_raw;
  std::string created_at;

  bool operator==(const CacheEntry&) const = default;
};

/// Append-only, line-delimited store of generated rationales keyed by
/// (user, prompt hash, model). Safe to share across threads.
class RationaleCache {
 public:
  explicit RationaleCache(std::filesystem::path path);

  std::optional<CacheEntry> lookup(const std::string& user, const std::string& prompt_hash,
                                   const std::string& model) const;
  void append(CacheEntry entry);
  std::vector<CacheEntry> entries() const;
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  static std::string key(const std::string& user, const std::string& hash, const std::string& model);

  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::vector<CacheEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;  // latest entry per key
};

std::string prompt_hash(const std::string& prompt_text);

struct GenerationFailure {
  std::string user;
  std::string message;
  bool parse_failure = false;
};

struct CostSummary {
  std::size_t network_calls = 0;
  std::size_t cache_hits = 0;
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
  double mean_latency_ms = 0.0;
  std::size_t failures = 0;
};

struct GenerationResult {
  std::vector<Rationale> rationales;  // successes, in prompt order
  std::vector<GenerationFailure> failures;
  CostSummary cost;
};

/// Generates (or recalls) one rationale per prompt with at most `concurrency`
/// generator calls in flight. Per-prompt failures are collected, not thrown.
GenerationResult generate_rationales(TextGenerator& generator,
                                     const std::vector<RenderedPrompt>& prompts,
                                     RationaleCache& cache, std::size_t concurrency);

}  // namespace slim
