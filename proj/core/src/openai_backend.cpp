// Eigen must come first: httplib pulls in <resolv.h>, whose _res macro
// collides with Eigen parameter names.
#include "modeldiff/gateway.hpp"

#include <httplib.h>

namespace modeldiff {

namespace {

// Splits "https://host:port/v1" into ("https://host:port", "/v1").
std::pair<std::string, std::string> split_base_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error("base_url must include a scheme: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, ""};
  std::string path = url.substr(path_start);
  while (!path.empty() && path.back() == '/') path.pop_back();
  return {url.substr(0, path_start), path};
}

}  // namespace

OpenAiBackend::OpenAiBackend(OpenAiOptions options) : options_(std::move(options)) {
  std::tie(host_, path_prefix_) = split_base_url(options_.base_url);
}

OpenAiBackend::~OpenAiBackend() = default;

json OpenAiBackend::build_chat_body(const ChatRequest& req, bool prefill) {
  json messages = json::array();
  if (req.system) messages.push_back({{"role", "system"}, {"content", *req.system}});
  messages.push_back({{"role", "user"}, {"content", req.user}});
  if (req.assistant_prefix) {
    if (!prefill) throw Error("provider does not support assistant prefill for model '" + req.model + "'");
    messages.push_back({{"role", "assistant"}, {"content", *req.assistant_prefix}});
  }
  json body{{"model", req.model},
            {"messages", std::move(messages)},
            {"temperature", req.gen.temperature},
            {"max_tokens", req.gen.max_new_tokens}};
  if (req.gen.n_samples > 1) body["n"] = req.gen.n_samples;
  if (req.gen.top_logprobs) {
    body["logprobs"] = true;
    body["top_logprobs"] = *req.gen.top_logprobs;
  }
  return body;
}

Completion OpenAiBackend::parse_chat_response(const std::string& body) {
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::parse_error&) {
    throw Error("provider returned malformed body: " + body.substr(0, 200));
  }
  try {
    Completion out;
    for (const auto& choice : doc.at("choices")) {
      Sample s;
      const auto& content = choice.at("message").at("content");
      s.text = content.is_null() ? std::string() : content.get<std::string>();
      if (choice.contains("logprobs") && choice["logprobs"].is_object() &&
          choice["logprobs"].contains("content") && choice["logprobs"]["content"].is_array()) {
        LogprobDump dump;
        for (const auto& pos : choice["logprobs"]["content"]) {
          dump.tokens.push_back(pos.at("token").get<std::string>());
          std::vector<TokenLogprob> alts;
          for (const auto& alt : pos.at("top_logprobs")) {
            alts.push_back({alt.at("token").get<std::string>(), std::min(0.0, alt.at("logprob").get<double>())});
          }
          std::stable_sort(alts.begin(), alts.end(),
                           [](const TokenLogprob& a, const TokenLogprob& b) { return a.logprob > b.logprob; });
          dump.per_position.push_back(std::move(alts));
        }
        s.logprobs = std::move(dump);
      }
      out.samples.push_back(std::move(s));
    }
    if (out.samples.empty()) throw Error("provider returned no choices");
    return out;
  } catch (const json::exception& e) {
    throw Error(std::string("provider returned malformed body: ") + e.what());
  }
}

json OpenAiBackend::post(const std::string& path, const json& body) {
  httplib::Client client(host_);
  client.set_connection_timeout(options_.timeout);
  client.set_read_timeout(options_.timeout);
  client.set_write_timeout(options_.timeout);
  httplib::Headers headers;
  if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);
  auto res = client.Post(path_prefix_ + path, headers, body.dump(), "application/json");
  if (!res) throw TransientError("request to " + host_ + " failed: " + httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500) {
    throw TransientError("provider status " + std::to_string(res->status));
  }
  if (res->status < 200 || res->status >= 300) {
    throw Error("provider status " + std::to_string(res->status) + ": " + res->body.substr(0, 300));
  }
  try {
    return json::parse(res->body);
  } catch (const json::parse_error&) {
    throw Error("provider returned malformed body: " + res->body.substr(0, 200));
  }
}

Completion OpenAiBackend::complete(const ChatRequest& req) {
  json body = build_chat_body(req, options_.supports_prefill);
  return parse_chat_response(post("/chat/completions", body).dump());
}

Eigen::MatrixXd OpenAiBackend::embed(const std::vector<std::string>& texts) {
  if (texts.empty()) return Eigen::MatrixXd(0, 0);
  if (options_.embedding_model.empty()) throw Error("no embedding model configured");
  json doc = post("/embeddings", json{{"model", options_.embedding_model}, {"input", texts}});
  try {
    const auto& data = doc.at("data");
    if (data.size() != texts.size()) throw Error("embedding response has wrong row count");
    Eigen::MatrixXd out;
    for (const auto& row : data) {
      auto index = row.at("index").get<std::size_t>();
      auto vec = row.at("embedding").get<std::vector<double>>();
      if (out.size() == 0) out.resize(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(vec.size()));
      if (index >= texts.size() || vec.size() != static_cast<std::size_t>(out.cols())) {
        throw Error("embedding response row " + std::to_string(index) + " malformed");
      }
      out.row(static_cast<Eigen::Index>(index)) =
          Eigen::Map<const Eigen::RowVectorXd>(vec.data(), static_cast<Eigen::Index>(vec.size()));
    }
    return out;
  } catch (const json::exception& e) {
    throw Error(std::string("provider returned malformed embedding body: ") + e.what());
  }
}

}  // namespace modeldiff
