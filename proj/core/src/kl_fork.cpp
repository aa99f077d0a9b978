#include "modeldiff/kl_fork.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "modeldiff/diff_llm.hpp"
#include "modeldiff/diff_sae.hpp"
#include "modeldiff/structured.hpp"

namespace modeldiff {

ForkScore positional_score(const std::vector<TokenLogprob>& top1, const std::vector<TokenLogprob>& top2) {
  if (top1.empty() || top2.empty()) throw PreconditionError("positional_score needs non-empty top-k lists");
  std::vector<std::string> support;
  std::map<std::string, std::pair<double, double>> probs;
  auto add = [&](const std::vector<TokenLogprob>& list, bool first) {
    for (const auto& t : list) {
      if (t.logprob > 0.0) throw PreconditionError("positive logprob for token '" + t.token + "'");
      auto [it, inserted] = probs.try_emplace(t.token, -1.0, -1.0);
      if (inserted) support.push_back(t.token);
      (first ? it->second.first : it->second.second) = std::exp(t.logprob);
    }
  };
  add(top1, true);
  add(top2, false);

  std::vector<double> p(support.size());
  std::vector<double> q(support.size());
  double zp = 0.0;
  double zq = 0.0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    const auto& [a, b] = probs[support[i]];
    p[i] = a < 0.0 ? kMissingTokenFloor : a;
    q[i] = b < 0.0 ? kMissingTokenFloor : b;
    zp += p[i];
    zq += q[i];
  }
  ForkScore s;
  for (std::size_t i = 0; i < support.size(); ++i) {
    p[i] /= zp;
    q[i] /= zq;
    if (p[i] > 0.0) {
      s.kl += p[i] * std::log(p[i] / q[i]);
      s.h1 -= p[i] * std::log(p[i]);
    }
    if (q[i] > 0.0) s.h2 -= q[i] * std::log(q[i]);
  }
  s.kl = std::max(0.0, s.kl);
  s.h1 = std::max(0.0, s.h1);
  s.h2 = std::max(0.0, s.h2);
  s.score = s.h1 + s.h2 > 0.0 ? s.kl / (s.h1 + s.h2) : 0.0;
  return s;
}

void to_json(json& j, const ForkPoint& f) {
  j = json{{"triplet_id", f.triplet_id},
           {"prompt", f.prompt},
           {"generator", std::string(1, side_char(f.generator))},
           {"prefix", f.prefix},
           {"fork_token", f.fork_token},
           {"position", f.score.position},
           {"kl", f.score.kl},
           {"h1", f.score.h1},
           {"h2", f.score.h2},
           {"score", f.score.score}};
}

void from_json(const json& j, ForkPoint& f) {
  f.triplet_id = j.at("triplet_id").get<std::string>();
  f.prompt = j.at("prompt").get<std::string>();
  f.generator = parse_side(j.at("generator").get<std::string>());
  f.prefix = j.at("prefix").get<std::string>();
  f.fork_token = j.at("fork_token").get<std::string>();
  f.score.position = j.at("position").get<std::size_t>();
  f.score.kl = j.at("kl").get<double>();
  f.score.h1 = j.at("h1").get<double>();
  f.score.h2 = j.at("h2").get<double>();
  f.score.score = j.at("score").get<double>();
}

namespace {

std::vector<TokenLogprob> read_top(const json& j) {
  std::vector<TokenLogprob> out;
  for (const auto& pair : j) out.push_back({pair.at(0).get<std::string>(), pair.at(1).get<double>()});
  return out;
}

json write_top(const std::vector<TokenLogprob>& top) {
  json out = json::array();
  for (const auto& t : top) out.push_back(json::array({t.token, t.logprob}));
  return out;
}

}  // namespace

std::pair<LogprobDump, LogprobDump> load_fork_dump(const std::filesystem::path& path) {
  LogprobDump gen;
  LogprobDump other;
  std::size_t line = 0;
  for (const auto& row : read_jsonl(path)) {
    ++line;
    const std::string where = path.filename().string() + " position line " + std::to_string(line) + ": ";
    try {
      if (row.at("pos").get<std::size_t>() != gen.tokens.size()) throw Error(where + "positions must be consecutive from 0");
      auto token = row.at("token").get<std::string>();
      gen.tokens.push_back(token);
      other.tokens.push_back(std::move(token));
      gen.per_position.push_back(read_top(row.at("top1")));
      other.per_position.push_back(read_top(row.at("top2")));
    } catch (const json::exception& e) {
      throw Error(where + e.what());
    }
  }
  try {
    gen.validate();
    other.validate();
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
  return {std::move(gen), std::move(other)};
}

void save_fork_dump(const std::filesystem::path& path, const LogprobDump& generator, const LogprobDump& other) {
  if (generator.tokens.size() != other.tokens.size()) throw PreconditionError("fork dumps differ in length");
  std::vector<json> rows;
  for (std::size_t i = 0; i < generator.tokens.size(); ++i) {
    rows.push_back({{"pos", i},
                    {"token", generator.tokens[i]},
                    {"top1", write_top(generator.per_position[i])},
                    {"top2", write_top(other.per_position[i])}});
  }
  write_jsonl(path, rows);
}

std::vector<ForkPoint> find_fork_tokens(const std::string& triplet_id, const std::string& prompt, Side generator,
                                        const LogprobDump& generator_dump, const LogprobDump& other_dump,
                                        std::size_t top_n) {
  const auto n = generator_dump.tokens.size();
  if (other_dump.tokens.size() != n || generator_dump.per_position.size() != n ||
      other_dump.per_position.size() != n) {
    throw Error("misaligned logprob dumps for " + triplet_id + ": " + std::to_string(n) + " vs " +
                std::to_string(other_dump.tokens.size()) + " positions");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (generator_dump.tokens[i] != other_dump.tokens[i]) {
      throw Error("misaligned logprob dumps for " + triplet_id + " at position " + std::to_string(i));
    }
  }
  std::vector<ForkScore> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = positional_score(generator_dump.per_position[i], other_dump.per_position[i]);
    scores[i].position = i;
  }
  std::stable_sort(scores.begin(), scores.end(), [](const ForkScore& a, const ForkScore& b) { return a.score > b.score; });
  scores.resize(std::min(top_n, n));

  std::vector<ForkPoint> out;
  for (const auto& s : scores) {
    ForkPoint f;
    f.triplet_id = triplet_id;
    f.prompt = prompt;
    f.generator = generator;
    for (std::size_t i = 0; i < s.position; ++i) f.prefix += generator_dump.tokens[i];
    f.fork_token = generator_dump.tokens[s.position];
    f.score = s;
    out.push_back(std::move(f));
  }
  return out;
}

void to_json(json& j, const ForkSamples& s) {
  j = json{{"completions_a", s.completions_a}, {"completions_b", s.completions_b}};
}

ForkSamples sample_fork_completions(Gateway& gateway, const std::string& model_a, const std::string& model_b,
                                    const ForkPoint& fork, int n, double temperature, int max_tokens,
                                    const PromptLibrary& prompts) {
  if (fork.prompt.empty() && fork.prefix.empty()) throw PreconditionError("fork prefix is empty");
  if (n < 1) throw PreconditionError("sample count must be >= 1");
  auto draw = [&](const std::string& model) {
    ChatRequest req;
    req.model = model;
    req.gen = GenerationConfig{max_tokens, temperature, std::nullopt, n};
    if (fork.prefix.empty()) {
      req.user = fork.prompt;
    } else if (gateway.supports_prefill(model)) {
      req.user = fork.prompt;
      req.assistant_prefix = fork.prefix;
    } else {
      req.user = prompts.render("continuation", {{"prompt", fork.prompt}, {"prefix", fork.prefix}});
    }
    Completion c;
    try {
      c = gateway.complete(req);
    } catch (const std::exception& e) {
      throw Error("incomplete sample set from '" + model + "': " + e.what());
    }
    if (c.samples.size() < static_cast<std::size_t>(n)) {
      throw Error("incomplete sample set from '" + model + "': got " + std::to_string(c.samples.size()) + " of " +
                  std::to_string(n));
    }
    std::vector<std::string> texts;
    for (int i = 0; i < n; ++i) texts.push_back(c.samples[static_cast<std::size_t>(i)].text);
    return texts;
  };
  ForkSamples out;
  out.completions_a = draw(model_a);
  out.completions_b = draw(model_b);
  return out;
}

std::string claim_from_neutral(const std::string& neutral_text) {
  std::string s = trim(neutral_text);
  const std::string lead = std::string(kModelPlaceholder) + " ";
  if (s.rfind(lead, 0) == 0) {
    s = trim(s.substr(lead.size()));
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  }
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

std::vector<Hypothesis> hypothesize_from_forks(Gateway& gateway, const std::string& model,
                                               const std::string& phrasing_model, const ForkPoint& fork,
                                               const ForkSamples& samples, const GenerationConfig& gen,
                                               std::vector<std::string>& warnings, const PromptLibrary& prompts) {
  if (samples.completions_a.empty() || samples.completions_b.empty()) {
    throw PreconditionError("both completion sets must be non-empty");
  }
  auto listing = [](const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += std::to_string(i + 1) + ". " + items[i] + "\n";
    if (!out.empty()) out.pop_back();
    return out;
  };
  std::string user = prompts.render("kl_hypotheses", {{"prompt", fork.prompt},
                                                      {"prefix", fork.prefix},
                                                      {"completions_a", listing(samples.completions_a)},
                                                      {"completions_b", listing(samples.completions_b)}});
  auto raw = ask_parsed(gateway, model, std::nullopt, user, gen, parse_difference_list);

  std::vector<Hypothesis> out;
  for (const auto& r : raw) {
    DifferenceRecord rec;
    try {
      rec = normalize_attribution(fork.triplet_id, r);
    } catch (const AttributionError& e) {
      warnings.push_back(std::string("fork difference skipped: ") + e.what());
      continue;
    }
    Hypothesis h;
    h.text = claim_from_neutral(rec.neutral_text);
    h.direction = rec.attributed_to;
    h.method = Method::Kl;
    h.support = 1;
    h.majority_fraction = 1.0;
    if (h.text.empty()) continue;
    out.push_back(adjust_phrasing(gateway, phrasing_model, h, gen, warnings, prompts));
  }
  return out;
}

}  // namespace modeldiff
