#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "modeldiff/common.hpp"

namespace modeldiff {

struct GenerationConfig {
  int max_new_tokens = 1024;
  double temperature = 0.0;
  std::optional<int> top_logprobs;
  int n_samples = 1;

  /// Throws PreconditionError when a field is outside its domain.
  void validate(int provider_max_top_logprobs = 20) const;
  std::string hash() const;
};

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;  // nats
};

/// Generated tokens with the top-k alternatives at every position.
struct LogprobDump {
  std::vector<std::string> tokens;
  std::vector<std::vector<TokenLogprob>> per_position;

  /// Checks length alignment, descending order, and logprob <= 0.
  void validate() const;
};

void to_json(json& j, const LogprobDump& d);
void from_json(const json& j, LogprobDump& d);

struct ChatRequest {
  std::string model;
  std::optional<std::string> system;
  std::string user;
  /// Partial assistant turn to continue from (prefill). Backends that cannot
  /// prefill reject requests carrying it.
  std::optional<std::string> assistant_prefix;
  GenerationConfig gen;
};

/// Content hash identifying a request's prompt for mock scripts and caches.
std::string prompt_hash(const ChatRequest& req);
std::string prompt_hash(std::string_view user);

struct Sample {
  std::string text;
  std::optional<LogprobDump> logprobs;
};

struct Completion {
  std::vector<Sample> samples;

  const std::string& text() const;
};

void to_json(json& j, const Completion& c);
void from_json(const json& j, Completion& c);

/// Retryable failure: rate limiting, 5xx, dropped connection.
class TransientError : public Error {
 public:
  using Error::Error;
};

class UnknownModelError : public Error {
 public:
  explicit UnknownModelError(const std::string& model) : Error("unknown model '" + model + "'") {}
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual Completion complete(const ChatRequest& req) = 0;
  virtual Eigen::MatrixXd embed(const std::vector<std::string>& texts);
  virtual bool supports_prefill() const { return true; }
};

// ---- mock backend ---------------------------------------------------------

struct ScriptEntry {
  std::string response;
  std::optional<LogprobDump> logprobs;
};

/// Scripted responses keyed by (model, prompt hash). Repeated keys form the
/// per-sample sequence returned for n_samples > 1.
class MockScript {
 public:
  void add(const std::string& model, const std::string& hash, ScriptEntry entry);
  const std::vector<ScriptEntry>* find(const std::string& model, const std::string& hash) const;
  std::size_t size() const;

  static MockScript load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::pair<std::string, std::string>, std::vector<ScriptEntry>> entries_;
};

using Responder = std::function<Completion(const ChatRequest&)>;

/// Deterministic offline backend. Lookup order: script, then a per-model
/// responder; anything else is an error. Responses are truncated to
/// gen.max_new_tokens whitespace tokens.
class MockBackend : public Backend {
 public:
  explicit MockBackend(MockScript script = {}, int embedding_dim = 256, std::uint64_t embedding_seed = 0x5eed);

  void set_responder(const std::string& model, Responder responder);
  /// The next `times` calls for `model` fail with TransientError.
  void fail_next(const std::string& model, int times);

  Completion complete(const ChatRequest& req) override;
  Eigen::MatrixXd embed(const std::vector<std::string>& texts) override;

  int embedding_dim() const { return embedding_dim_; }

 private:
  MockScript script_;
  std::map<std::string, Responder> responders_;
  std::map<std::string, int> pending_failures_;
  std::mutex mu_;
  int embedding_dim_;
  std::uint64_t embedding_seed_;
};

/// Hashed bag-of-words pseudo-embedding: equal texts map to equal unit
/// vectors, texts sharing words land nearby.
Eigen::VectorXd pseudo_embedding(std::string_view text, int dim, std::uint64_t seed);

/// Keeps the first `max_tokens` whitespace-delimited tokens of `text`.
std::string truncate_tokens(std::string_view text, int max_tokens);

/// Decorator that records every successful completion as a mock script entry.
class RecordingBackend : public Backend {
 public:
  explicit RecordingBackend(std::shared_ptr<Backend> inner) : inner_(std::move(inner)) {}

  Completion complete(const ChatRequest& req) override;
  Eigen::MatrixXd embed(const std::vector<std::string>& texts) override { return inner_->embed(texts); }
  bool supports_prefill() const override { return inner_->supports_prefill(); }

  MockScript script() const;

 private:
  std::shared_ptr<Backend> inner_;
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, Completion> seen_;
};

// ---- live backend ---------------------------------------------------------

struct OpenAiOptions {
  std::string base_url = "https://api.openai.com/v1";
  std::string api_key;
  bool supports_prefill = false;
  int max_top_logprobs = 20;
  std::chrono::seconds timeout{120};
  std::string embedding_model;
};

/// OpenAI-compatible chat-completions and embeddings over HTTP(S).
class OpenAiBackend : public Backend {
 public:
  explicit OpenAiBackend(OpenAiOptions options);
  ~OpenAiBackend() override;

  Completion complete(const ChatRequest& req) override;
  Eigen::MatrixXd embed(const std::vector<std::string>& texts) override;
  bool supports_prefill() const override { return options_.supports_prefill; }

  static json build_chat_body(const ChatRequest& req, bool prefill);
  static Completion parse_chat_response(const std::string& body);

 private:
  json post(const std::string& path, const json& body);

  OpenAiOptions options_;
  std::string host_;
  std::string path_prefix_;
};

// ---- gateway --------------------------------------------------------------

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{30000};
};

/// Content-addressed on-disk cache of completions. Concurrent readers,
/// serialized writers.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);

  std::optional<Completion> get(const std::string& key) const;
  void put(const std::string& key, const Completion& completion);
  static std::string key_for(const ChatRequest& req);

 private:
  std::filesystem::path dir_;
  mutable std::shared_mutex mu_;
};

/// Requests-per-second limiter; rate <= 0 disables it.
class RateLimiter {
 public:
  explicit RateLimiter(double per_second) : per_second_(per_second) {}
  void acquire();

 private:
  double per_second_;
  std::mutex mu_;
  std::chrono::steady_clock::time_point next_{};
};

struct GatewayOptions {
  std::size_t parallelism = 8;
  RetryPolicy retry;
  std::optional<std::filesystem::path> cache_dir;
};

struct GatewayStats {
  std::size_t calls = 0;
  std::size_t cache_hits = 0;
  std::size_t retries = 0;
  std::size_t failures = 0;
};

class Gateway {
 public:
  explicit Gateway(GatewayOptions options = {});
  ~Gateway();

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  void register_model(const std::string& model_id, std::shared_ptr<Backend> backend,
                      std::string provider_model = {}, double rate_per_second = 0.0);
  void set_embedder(std::shared_ptr<Backend> backend);
  bool has_model(const std::string& model_id) const;
  bool supports_prefill(const std::string& model_id) const;

  Completion complete(const ChatRequest& req);
  std::string complete_text(const std::string& model, const std::optional<std::string>& system,
                            const std::string& user, const GenerationConfig& gen = {});
  Eigen::MatrixXd embed(const std::vector<std::string>& texts);

  std::vector<Outcome<Completion>> complete_batch(const std::vector<ChatRequest>& requests,
                                                  std::size_t parallelism);

  /// Runs fn(i) for i in [0, n) on up to `parallelism` workers. Exceptions are
  /// captured per index; the first one (by index) is rethrown after all
  /// workers finish.
  void parallel_for(std::size_t n, std::size_t parallelism, const std::function<void(std::size_t)>& fn);

  std::size_t parallelism() const { return options_.parallelism; }
  GatewayStats stats() const;
  /// Hook for tests; defaults to std::this_thread::sleep_for.
  void set_sleeper(std::function<void(std::chrono::milliseconds)> sleeper);

 private:
  struct Route;
  Completion call_with_retry(Route& route, const ChatRequest& req);

  GatewayOptions options_;
  std::map<std::string, std::unique_ptr<Route>> routes_;
  std::shared_ptr<Backend> embedder_;
  std::unique_ptr<ResponseCache> cache_;
  struct Budget;
  std::unique_ptr<Budget> budget_;
  std::function<void(std::chrono::milliseconds)> sleeper_;
  mutable std::mutex stats_mu_;
  GatewayStats stats_;
};

}  // namespace modeldiff
