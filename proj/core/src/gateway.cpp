#include "modeldiff/gateway.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <thread>

namespace modeldiff {

void GenerationConfig::validate(int provider_max_top_logprobs) const {
  if (max_new_tokens < 1) throw PreconditionError("max_new_tokens must be >= 1");
  if (!(temperature >= 0.0)) throw PreconditionError("temperature must be >= 0");
  if (n_samples < 1) throw PreconditionError("n_samples must be >= 1");
  if (top_logprobs && (*top_logprobs < 1 || *top_logprobs > provider_max_top_logprobs)) {
    throw PreconditionError("top_logprobs must be in [1, " + std::to_string(provider_max_top_logprobs) + "]");
  }
}

std::string GenerationConfig::hash() const {
  json j{{"max_new_tokens", max_new_tokens},
         {"temperature", temperature},
         {"top_logprobs", top_logprobs ? json(*top_logprobs) : json(nullptr)},
         {"n_samples", n_samples}};
  return sha256_hex(j.dump());
}

void LogprobDump::validate() const {
  if (per_position.size() != tokens.size()) {
    throw Error("logprob dump misaligned: " + std::to_string(tokens.size()) + " tokens, " +
                std::to_string(per_position.size()) + " positions");
  }
  for (std::size_t i = 0; i < per_position.size(); ++i) {
    const auto& alts = per_position[i];
    if (alts.empty()) throw Error("logprob dump position " + std::to_string(i) + " has no alternatives");
    for (std::size_t k = 0; k < alts.size(); ++k) {
      if (!(alts[k].logprob <= 0.0)) {
        throw Error("logprob dump position " + std::to_string(i) + ": positive logprob");
      }
      if (k > 0 && alts[k].logprob > alts[k - 1].logprob) {
        throw Error("logprob dump position " + std::to_string(i) + ": alternatives not sorted");
      }
    }
  }
}

void to_json(json& j, const LogprobDump& d) {
  json positions = json::array();
  for (const auto& alts : d.per_position) {
    json row = json::array();
    for (const auto& a : alts) row.push_back(json::array({a.token, a.logprob}));
    positions.push_back(std::move(row));
  }
  j = json{{"tokens", d.tokens}, {"per_position", std::move(positions)}};
}

void from_json(const json& j, LogprobDump& d) {
  d.tokens = j.at("tokens").get<std::vector<std::string>>();
  d.per_position.clear();
  for (const auto& row : j.at("per_position")) {
    std::vector<TokenLogprob> alts;
    for (const auto& pair : row) alts.push_back({pair.at(0).get<std::string>(), pair.at(1).get<double>()});
    d.per_position.push_back(std::move(alts));
  }
}

std::string prompt_hash(std::string_view user) { return sha256_hex(user); }

std::string prompt_hash(const ChatRequest& req) {
  if (!req.system && !req.assistant_prefix) return prompt_hash(req.user);
  std::string canonical = req.system.value_or("");
  canonical += "\n\n";
  canonical += req.user;
  if (req.assistant_prefix) {
    canonical += "\n\n[assistant prefix]\n";
    canonical += *req.assistant_prefix;
  }
  return sha256_hex(canonical);
}

const std::string& Completion::text() const {
  if (samples.empty()) throw Error("completion has no samples");
  return samples.front().text;
}

void to_json(json& j, const Completion& c) {
  j = json::array();
  for (const auto& s : c.samples) {
    json row{{"text", s.text}};
    if (s.logprobs) row["logprobs"] = *s.logprobs;
    j.push_back(std::move(row));
  }
}

void from_json(const json& j, Completion& c) {
  c.samples.clear();
  for (const auto& row : j) {
    Sample s;
    s.text = row.at("text").get<std::string>();
    if (row.contains("logprobs")) s.logprobs = row.at("logprobs").get<LogprobDump>();
    c.samples.push_back(std::move(s));
  }
}

Eigen::MatrixXd Backend::embed(const std::vector<std::string>&) {
  throw Error("backend does not provide embeddings");
}

// ---- cache ----------------------------------------------------------------

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::string ResponseCache::key_for(const ChatRequest& req) {
  return sha256_hex(req.model + '\n' + prompt_hash(req) + '\n' + req.gen.hash());
}

std::optional<Completion> ResponseCache::get(const std::string& key) const {
  std::shared_lock lock(mu_);
  auto path = dir_ / (key + ".json");
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    return json::parse(read_text(path)).get<Completion>();
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void ResponseCache::put(const std::string& key, const Completion& completion) {
  std::unique_lock lock(mu_);
  auto path = dir_ / (key + ".json");
  if (std::filesystem::exists(path)) return;
  auto tmp = dir_ / (key + ".tmp");
  write_text(tmp, json(completion).dump());
  std::filesystem::rename(tmp, path);
}

// ---- rate limiting ----------------------------------------------------------

void RateLimiter::acquire() {
  if (per_second_ <= 0.0) return;
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mu_);
    auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_);
    next_ = slot + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                       std::chrono::duration<double>(1.0 / per_second_));
  }
  std::this_thread::sleep_until(slot);
}

// ---- gateway ----------------------------------------------------------------

struct Gateway::Route {
  std::shared_ptr<Backend> backend;
  std::string provider_model;
  RateLimiter limiter;

  Route(std::shared_ptr<Backend> b, std::string pm, double rate)
      : backend(std::move(b)), provider_model(std::move(pm)), limiter(rate) {}
};

/// Global cap on in-flight backend calls.
struct Gateway::Budget {
  explicit Budget(std::size_t n) : available(std::max<std::size_t>(n, 1)) {}
  void acquire() {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return available > 0; });
    --available;
  }
  void release() {
    {
      std::lock_guard lock(mu);
      ++available;
    }
    cv.notify_one();
  }
  std::size_t available;
  std::mutex mu;
  std::condition_variable cv;
};

Gateway::Gateway(GatewayOptions options)
    : options_(std::move(options)),
      budget_(std::make_unique<Budget>(options_.parallelism)),
      sleeper_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {
  if (options_.cache_dir) cache_ = std::make_unique<ResponseCache>(*options_.cache_dir);
}

Gateway::~Gateway() = default;

void Gateway::register_model(const std::string& model_id, std::shared_ptr<Backend> backend,
                             std::string provider_model, double rate_per_second) {
  if (provider_model.empty()) provider_model = model_id;
  routes_[model_id] = std::make_unique<Route>(std::move(backend), std::move(provider_model), rate_per_second);
}

void Gateway::set_embedder(std::shared_ptr<Backend> backend) { embedder_ = std::move(backend); }

bool Gateway::has_model(const std::string& model_id) const { return routes_.count(model_id) > 0; }

bool Gateway::supports_prefill(const std::string& model_id) const {
  auto it = routes_.find(model_id);
  if (it == routes_.end()) throw UnknownModelError(model_id);
  return it->second->backend->supports_prefill();
}

void Gateway::set_sleeper(std::function<void(std::chrono::milliseconds)> sleeper) {
  sleeper_ = std::move(sleeper);
}

GatewayStats Gateway::stats() const {
  std::lock_guard lock(stats_mu_);
  return stats_;
}

Completion Gateway::call_with_retry(Route& route, const ChatRequest& req) {
  ChatRequest routed = req;
  routed.model = route.provider_model;
  auto backoff = options_.retry.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      route.limiter.acquire();
      budget_->acquire();
      struct Release {
        Budget* b;
        ~Release() { b->release(); }
      } release{budget_.get()};
      return route.backend->complete(routed);
    } catch (const TransientError& e) {
      if (attempt >= options_.retry.max_attempts) {
        throw Error("retries exhausted for model '" + req.model + "' after " + std::to_string(attempt) +
                    " attempts: " + e.what());
      }
      {
        std::lock_guard lock(stats_mu_);
        ++stats_.retries;
      }
      sleeper_(backoff);
      auto next = std::chrono::milliseconds(
          static_cast<long long>(static_cast<double>(backoff.count()) * options_.retry.multiplier));
      backoff = std::min(next, options_.retry.max_backoff);
    }
  }
}

Completion Gateway::complete(const ChatRequest& req) {
  auto it = routes_.find(req.model);
  if (it == routes_.end()) throw UnknownModelError(req.model);
  req.gen.validate();
  {
    std::lock_guard lock(stats_mu_);
    ++stats_.calls;
  }
  std::string key;
  if (cache_) {
    key = ResponseCache::key_for(req);
    if (auto hit = cache_->get(key)) {
      std::lock_guard lock(stats_mu_);
      ++stats_.cache_hits;
      return *hit;
    }
  }
  try {
    Completion out = call_with_retry(*it->second, req);
    for (const auto& s : out.samples) {
      if (s.logprobs) s.logprobs->validate();
    }
    if (cache_) cache_->put(key, out);
    return out;
  } catch (...) {
    std::lock_guard lock(stats_mu_);
    ++stats_.failures;
    throw;
  }
}

std::string Gateway::complete_text(const std::string& model, const std::optional<std::string>& system,
                                   const std::string& user, const GenerationConfig& gen) {
  ChatRequest req;
  req.model = model;
  req.system = system;
  req.user = user;
  req.gen = gen;
  return complete(req).text();
}

Eigen::MatrixXd Gateway::embed(const std::vector<std::string>& texts) {
  if (!embedder_) throw Error("no embedding backend configured");
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (texts[i].empty()) throw PreconditionError("embed: empty text at index " + std::to_string(i));
  }
  Eigen::MatrixXd out = embedder_->embed(texts);
  if (static_cast<std::size_t>(out.rows()) != texts.size()) {
    throw Error("embedding backend returned " + std::to_string(out.rows()) + " rows for " +
                std::to_string(texts.size()) + " texts");
  }
  return out;
}

void Gateway::parallel_for(std::size_t n, std::size_t parallelism,
                           const std::function<void(std::size_t)>& fn) {
  if (parallelism < 1) throw PreconditionError("parallelism must be >= 1");
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::size_t threads = std::min(parallelism, n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<Outcome<Completion>> Gateway::complete_batch(const std::vector<ChatRequest>& requests,
                                                         std::size_t parallelism) {
  if (parallelism < 1) throw PreconditionError("parallelism must be >= 1");
  std::vector<Outcome<Completion>> results(requests.size(), Outcome<Completion>::failure("not run"));
  parallel_for(requests.size(), parallelism, [&](std::size_t i) {
    try {
      results[i] = Outcome<Completion>::success(complete(requests[i]));
    } catch (const std::exception& e) {
      results[i] = Outcome<Completion>::failure(e.what());
    }
  });
  return results;
}

}  // namespace modeldiff
