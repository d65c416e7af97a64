#include "slim/llm_client.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "slim/error.hpp"
#include "slim/hashing.hpp"
#include "slim/jsonl.hpp"

namespace slim {

using nlohmann::json;

void EndpointConfig::validate() const {
  if (base_url.empty()) throw InputError("endpoint base_url is empty");
  if (max_tokens < 1) throw InputError("endpoint max_tokens must be >= 1");
  if (temperature < 0) throw InputError("endpoint temperature must be >= 0");
  if (max_retries < 0) throw InputError("endpoint max_retries must be >= 0");
}

std::optional<std::string> EndpointConfig::resolved_api_key() const {
  if (api_key && !api_key->empty()) return api_key;
  if (!api_key_env.empty()) {
    if (const char* v = std::getenv(api_key_env.c_str()); v && *v) return std::string(v);
  }
  return std::nullopt;
}

namespace {

class HttplibTransport final : public HttpTransport {
 public:
  HttpResponse post(const std::string& url, const std::string& json_body, const HttpHeaders& headers,
                    std::chrono::milliseconds timeout) override {
    const auto scheme_end = url.find("://");
    const auto path_begin = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    const auto origin = url.substr(0, path_begin);
    const auto path = path_begin == std::string::npos ? std::string("/") : url.substr(path_begin);

    httplib::Client client(origin);
    const auto secs = timeout.count() / 1000;
    const auto usecs = (timeout.count() % 1000) * 1000;
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(path, h, json_body, "application/json");
    if (!res) return {0, httplib::to_string(res.error())};
    return {res->status, res->body};
  }
};

std::string body_excerpt(const std::string& body) {
  constexpr std::size_t kMax = 200;
  return body.size() <= kMax ? body : body.substr(0, kMax) + "...";
}

std::string utc_now_iso() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::size_t count_words(const std::string& s) {
  std::istringstream in(s);
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

}  // namespace

std::shared_ptr<HttpTransport> make_http_transport() { return std::make_shared<HttplibTransport>(); }

bool is_retryable_status(int status) {
  return status == 0 || status == 408 || status == 429 || (status >= 500 && status <= 599);
}

PostResult post_json_with_retry(const EndpointConfig& cfg, HttpTransport& transport,
                                const std::string& path, const json& body) {
  cfg.validate();
  std::string url = cfg.base_url;
  while (!url.empty() && url.back() == '/') url.pop_back();
  url += "/" + path;

  HttpHeaders headers{{"Accept", "application/json"}};
  if (auto key = cfg.resolved_api_key()) headers.emplace_back("Authorization", "Bearer " + *key);

  const auto payload = body.dump();
  auto delay = cfg.backoff_initial;
  std::string last_error;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(delay);
      delay = std::min(cfg.backoff_max, std::chrono::milliseconds(static_cast<long long>(
                                            static_cast<double>(delay.count()) * cfg.backoff_multiplier)));
    }
    const auto res = transport.post(url, payload, headers, cfg.timeout);
    if (res.status >= 200 && res.status < 300) {
      try {
        return {json::parse(res.body), attempt};
      } catch (const json::parse_error&) {
        throw EndpointError(res.status, "unparseable body: " + body_excerpt(res.body));
      }
    }
    if (!is_retryable_status(res.status)) throw EndpointError(res.status, body_excerpt(res.body));
    last_error = res.status == 0 ? "no response (" + res.body + ")"
                                 : "status " + std::to_string(res.status) + ": " + body_excerpt(res.body);
  }
  const int attempts = cfg.max_retries + 1;
  throw TransportError(url + " failed after " + std::to_string(attempts) + " attempts; last: " + last_error,
                       attempts);
}

ChatResult chat_complete(const EndpointConfig& cfg, HttpTransport& transport, const std::string& prompt) {
  if (prompt.empty()) throw PreconditionError("chat_complete: empty prompt");
  const json request{{"model", cfg.model_name},
                     {"messages", json::array({{{"role", "user"}, {"content", prompt}}})},
                     {"max_tokens", cfg.max_tokens},
                     {"temperature", cfg.temperature}};
  const auto start = std::chrono::steady_clock::now();
  auto [body, retries] = post_json_with_retry(cfg, transport, "chat/completions", request);
  ChatResult out;
  out.latency = std::chrono::steady_clock::now() - start;
  out.retries = retries;
  try {
    out.text = body.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    throw EndpointError(200, "response has no choices[0].message.content: " + body_excerpt(body.dump()));
  }
  if (auto usage = body.find("usage"); usage != body.end() && usage->is_object()) {
    out.prompt_tokens = usage->value("prompt_tokens", std::size_t{0});
    out.completion_tokens = usage->value("completion_tokens", std::size_t{0});
  } else {
    out.prompt_tokens = count_words(prompt);
    out.completion_tokens = count_words(out.text);
  }
  return out;
}

RemoteChatGenerator::RemoteChatGenerator(EndpointConfig cfg, std::shared_ptr<HttpTransport> transport)
    : cfg_(std::move(cfg)), transport_(std::move(transport)) {
  cfg_.validate();
}

ChatResult RemoteChatGenerator::generate(const std::string& prompt) {
  return chat_complete(cfg_, *transport_, prompt);
}

MockLlm::MockLlm(ItemTable catalog) : catalog_(std::move(catalog)) {
  for (const auto& item : catalog_.items()) {
    if (item.category) titles_by_category_[*item.category].push_back(item.title);
  }
  for (auto& [_, titles] : titles_by_category_) std::sort(titles.begin(), titles.end());
}

std::string MockLlm::respond(const std::string& prompt) const {
  static const std::string kCat = " (category: ";
  static const std::string kBrand = " (brand: ";
  std::vector<std::string> titles;
  std::map<std::string, std::size_t> votes;
  std::istringstream in(prompt);
  std::string line;
  while (std::getline(in, line)) {
    std::size_t i = 0;
    while (i < line.size() && line[i] == ' ') ++i;
    const auto digits = i;
    while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
    if (i == digits || i + 1 >= line.size() || line[i] != '.' || line[i + 1] != ' ') continue;
    std::string rest = line.substr(i + 2);
    std::optional<std::string> category;
    if (auto c = rest.find(kCat); c != std::string::npos) {
      const auto close = rest.find(')', c + kCat.size());
      if (close != std::string::npos) category = rest.substr(c + kCat.size(), close - c - kCat.size());
      rest.resize(c);
    }
    if (auto b = rest.find(kBrand); b != std::string::npos) rest.resize(b);
    if (rest.empty()) continue;
    titles.push_back(rest);
    if (category) ++votes[*category];
  }
  if (titles.empty()) throw Error("mock LLM: prompt has no recognizable item listing");
  if (votes.empty()) throw Error("mock LLM: no listed item carries a category");

  // std::map iterates lexicographically, so the first maximum wins ties.
  auto best = votes.begin();
  for (auto it = votes.begin(); it != votes.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  const std::string& token = best->first;

  std::vector<std::string> picks;
  if (auto it = titles_by_category_.find(token); it != titles_by_category_.end()) {
    for (const auto& t : it->second) {
      if (std::find(titles.begin(), titles.end(), t) != titles.end()) continue;
      picks.push_back(t);
      if (picks.size() == 3) break;
    }
  }
  std::string step3;
  for (std::size_t i = 0; i < picks.size(); ++i) step3 += (i ? "; " : "") + picks[i];
  if (step3.empty()) step3 = "more " + token + " products";
  return format_rationale("prefers " + token + " products", token, step3);
}

MockGenerator::MockGenerator(std::shared_ptr<const MockLlm> llm, std::string model_name)
    : llm_(std::move(llm)), model_(std::move(model_name)) {}

ChatResult MockGenerator::generate(const std::string& prompt) {
  const auto start = std::chrono::steady_clock::now();
  ChatResult out;
  out.text = llm_->respond(prompt);
  out.latency = std::chrono::steady_clock::now() - start;
  out.prompt_tokens = count_words(prompt);
  out.completion_tokens = count_words(out.text);
  return out;
}

RationaleCache::RationaleCache(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(path_)) return;
  const auto src = path_.string();
  jsonl::for_each(path_, [&](const json& rec, std::size_t line) {
    CacheEntry e{jsonl::require_string(rec, "user", src, line),
                 jsonl::require_string(rec, "prompt_hash", src, line),
                 jsonl::require_string(rec, "model", src, line),
                 jsonl::require_string(rec, "rationale_raw", src, line),
                 jsonl::require_string(rec, "created_at", src, line)};
    index_[key(e.user, e.prompt_hash, e.model)] = entries_.size();
    entries_.push_back(std::move(e));
  });
}

std::string RationaleCache::key(const std::string& user, const std::string& hash, const std::string& model) {
  json k = json::array({user, hash, model});
  return k.dump();
}

std::optional<CacheEntry> RationaleCache::lookup(const std::string& user, const std::string& hash,
                                                 const std::string& model) const {
  std::lock_guard lock(mu_);
  auto it = index_.find(key(user, hash, model));
  if (it == index_.end()) return std::nullopt;
  return entries_[it->second];
}

void RationaleCache::append(CacheEntry e) {
  if (e.created_at.empty()) e.created_at = utc_now_iso();
  const json rec{{"user", e.user},
                 {"prompt_hash", e.prompt_hash},
                 {"model", e.model},
                 {"rationale_raw", e.rationale_raw},
                 {"created_at", e.created_at}};
  std::lock_guard lock(mu_);
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  if (!out) throw InputError("cannot append to cache " + path_.string());
  out << rec.dump() << '\n';
  out.flush();
  if (!out) throw InputError("write failed: " + path_.string());
  index_[key(e.user, e.prompt_hash, e.model)] = entries_.size();
  entries_.push_back(std::move(e));
}

std::vector<CacheEntry> RationaleCache::entries() const {
  std::lock_guard lock(mu_);
  return entries_;
}

std::size_t RationaleCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::string prompt_hash(const std::string& prompt_text) { return sha256_hex(prompt_text); }

GenerationResult generate_rationales(TextGenerator& generator, const std::vector<RenderedPrompt>& prompts,
                                     RationaleCache& cache, std::size_t concurrency) {
  if (concurrency == 0) throw PreconditionError("generate_rationales: concurrency must be >= 1");
  const auto model = generator.model();

  struct Slot {
    std::optional<Rationale> rationale;
    std::optional<GenerationFailure> failure;
    std::optional<ChatResult> call;
    bool cached = false;
  };
  std::vector<Slot> slots(prompts.size());
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    if (auto hit = cache.lookup(p.user, prompt_hash(p.text), model)) {
      slots[i].cached = true;
      try {
        slots[i].rationale = parse_rationale(p.user, hit->rationale_raw);
      } catch (const RationaleParseError& e) {
        slots[i].failure = GenerationFailure{p.user, e.what(), true};
      }
    } else {
      pending.push_back(i);
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const auto k = next.fetch_add(1);
      if (k >= pending.size()) return;
      const auto i = pending[k];
      const auto& p = prompts[i];
      try {
        auto res = generator.generate(p.text);
        slots[i].call = res;
        try {
          slots[i].rationale = parse_rationale(p.user, res.text);
          cache.append({p.user, prompt_hash(p.text), model, res.text, {}});
        } catch (const RationaleParseError& e) {
          slots[i].failure = GenerationFailure{p.user, e.what(), true};
        }
      } catch (const std::exception& e) {
        slots[i].failure = GenerationFailure{p.user, e.what(), false};
      }
    }
  };
  const auto n_workers = std::min(concurrency, pending.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(n_workers);
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  }

  GenerationResult out;
  double latency_sum = 0;
  for (auto& s : slots) {
    if (s.cached) ++out.cost.cache_hits;
    if (s.call) {
      ++out.cost.network_calls;
      out.cost.prompt_tokens += s.call->prompt_tokens;
      out.cost.completion_tokens += s.call->completion_tokens;
      latency_sum += s.call->latency.count();
    }
    if (s.rationale) out.rationales.push_back(std::move(*s.rationale));
    if (s.failure) out.failures.push_back(std::move(*s.failure));
  }
  // Calls that threw before returning still count as attempted network calls.
  for (const auto& f : out.failures) {
    if (!f.parse_failure) ++out.cost.network_calls;
  }
  std::size_t timed = 0;
  for (const auto& s : slots) timed += s.call ? 1 : 0;
  out.cost.mean_latency_ms = timed ? latency_sum / static_cast<double>(timed) : 0.0;
  out.cost.failures = out.failures.size();
  return out;
}

}  // namespace slim
