#include <cctype>

#include "modeldiff/gateway.hpp"

namespace modeldiff {

namespace {

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<std::string> bag_of_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

Eigen::VectorXd pseudo_embedding(std::string_view text, int dim, std::uint64_t seed) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  auto add_token = [&](std::string_view token) {
    std::uint64_t state = fnv1a64(token) ^ seed;
    for (int k = 0; k < dim; ++k) {
      double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
      v[k] += 2.0 * u - 1.0;
    }
  };
  auto words = bag_of_words(text);
  if (words.empty()) {
    add_token(text);
  } else {
    for (const auto& w : words) add_token(w);
  }
  double norm = v.norm();
  if (norm > 0.0) v /= norm;
  return v;
}

std::string truncate_tokens(std::string_view text, int max_tokens) {
  int seen = 0;
  bool in_token = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    bool space = std::isspace(static_cast<unsigned char>(text[i])) != 0;
    if (!space && !in_token) {
      if (seen == max_tokens) return trim(text.substr(0, i));
      ++seen;
    }
    in_token = !space;
  }
  return std::string(text);
}

// ---- script -----------------------------------------------------------------

void MockScript::add(const std::string& model, const std::string& hash, ScriptEntry entry) {
  entries_[{model, hash}].push_back(std::move(entry));
}

const std::vector<ScriptEntry>* MockScript::find(const std::string& model, const std::string& hash) const {
  auto it = entries_.find({model, hash});
  return it == entries_.end() ? nullptr : &it->second;
}

std::size_t MockScript::size() const {
  std::size_t n = 0;
  for (const auto& [key, list] : entries_) n += list.size();
  return n;
}

MockScript MockScript::load(const std::filesystem::path& path) {
  MockScript script;
  std::size_t line = 0;
  for (const auto& row : read_jsonl(path)) {
    ++line;
    try {
      ScriptEntry entry;
      entry.response = row.at("response").get<std::string>();
      if (row.contains("logprobs") && !row.at("logprobs").is_null()) {
        entry.logprobs = row.at("logprobs").get<LogprobDump>();
        entry.logprobs->validate();
      }
      script.add(row.at("model").get<std::string>(), row.at("prompt_hash").get<std::string>(),
                 std::move(entry));
    } catch (const json::exception& e) {
      throw Error(path.string() + ": entry " + std::to_string(line) + ": " + e.what());
    }
  }
  return script;
}

void MockScript::save(const std::filesystem::path& path) const {
  std::vector<json> rows;
  for (const auto& [key, list] : entries_) {
    for (const auto& entry : list) {
      json row{{"model", key.first}, {"prompt_hash", key.second}, {"response", entry.response}};
      if (entry.logprobs) row["logprobs"] = *entry.logprobs;
      rows.push_back(std::move(row));
    }
  }
  write_jsonl(path, rows);
}

// ---- backend ----------------------------------------------------------------

MockBackend::MockBackend(MockScript script, int embedding_dim, std::uint64_t embedding_seed)
    : script_(std::move(script)), embedding_dim_(embedding_dim), embedding_seed_(embedding_seed) {}

void MockBackend::set_responder(const std::string& model, Responder responder) {
  std::lock_guard lock(mu_);
  responders_[model] = std::move(responder);
}

void MockBackend::fail_next(const std::string& model, int times) {
  std::lock_guard lock(mu_);
  pending_failures_[model] = times;
}

Completion MockBackend::complete(const ChatRequest& req) {
  Responder responder;
  {
    std::lock_guard lock(mu_);
    auto f = pending_failures_.find(req.model);
    if (f != pending_failures_.end() && f->second > 0) {
      --f->second;
      throw TransientError("mock: scripted transient failure for '" + req.model + "'");
    }
    auto r = responders_.find(req.model);
    if (r != responders_.end()) responder = r->second;
  }

  Completion out;
  std::string hash = prompt_hash(req);
  if (const auto* entries = script_.find(req.model, hash)) {
    auto n = std::min<std::size_t>(entries->size(), static_cast<std::size_t>(req.gen.n_samples));
    for (std::size_t i = 0; i < n; ++i) {
      Sample s{(*entries)[i].response, std::nullopt};
      if (req.gen.top_logprobs && (*entries)[i].logprobs) s.logprobs = (*entries)[i].logprobs;
      out.samples.push_back(std::move(s));
    }
  } else if (responder) {
    out = responder(req);
  } else {
    throw Error("mock: no script entry for model '" + req.model + "' prompt_hash " + hash);
  }
  for (auto& s : out.samples) s.text = truncate_tokens(s.text, req.gen.max_new_tokens);
  return out;
}

Eigen::MatrixXd MockBackend::embed(const std::vector<std::string>& texts) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(texts.size()), embedding_dim_);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = pseudo_embedding(texts[i], embedding_dim_, embedding_seed_).transpose();
  }
  return out;
}

// ---- recording ----------------------------------------------------------------

Completion RecordingBackend::complete(const ChatRequest& req) {
  Completion out = inner_->complete(req);
  std::lock_guard lock(mu_);
  auto key = std::make_pair(req.model, prompt_hash(req));
  auto it = seen_.find(key);
  // Keep the longest sample list seen for a key so n_samples replays stay total.
  if (it == seen_.end() || it->second.samples.size() < out.samples.size()) seen_[key] = out;
  return out;
}

MockScript RecordingBackend::script() const {
  std::lock_guard lock(mu_);
  MockScript script;
  for (const auto& [key, completion] : seen_) {
    for (const auto& s : completion.samples) script.add(key.first, key.second, ScriptEntry{s.text, s.logprobs});
  }
  return script;
}

}  // namespace modeldiff
