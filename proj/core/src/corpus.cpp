#include "modeldiff/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace modeldiff {

void to_json(json& j, const PromptRecord& p) {
  j = json{{"id", p.id}, {"text", p.text}};
  if (!p.meta.empty()) j["meta"] = p.meta;
}

void from_json(const json& j, PromptRecord& p) {
  p.id = j.at("id").get<std::string>();
  p.text = j.at("text").get<std::string>();
  p.meta.clear();
  if (j.contains("meta") && j.at("meta").is_object()) {
    for (const auto& [k, v] : j.at("meta").items()) p.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
  }
}

void to_json(json& j, const Triplet& t) {
  j = json{{"prompt_id", t.prompt_id}, {"prompt", t.prompt},   {"response_a", t.response_a},
           {"response_b", t.response_b}, {"model_a", t.model_a}, {"model_b", t.model_b}};
}

void from_json(const json& j, Triplet& t) {
  t.prompt_id = j.at("prompt_id").get<std::string>();
  t.prompt = j.at("prompt").get<std::string>();
  t.response_a = j.at("response_a").get<std::string>();
  t.response_b = j.at("response_b").get<std::string>();
  t.model_a = j.at("model_a").get<std::string>();
  t.model_b = j.at("model_b").get<std::string>();
}

std::vector<PromptRecord> load_prompts(const std::filesystem::path& path, std::optional<std::size_t> limit) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open prompts file " + path.string());
  std::vector<PromptRecord> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while ((!limit || out.size() < *limit) && std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error&) {
      throw Error(where + "malformed JSON");
    }
    if (!row.is_object()) throw Error(where + "expected a JSON object");
    for (const char* field : {"id", "text"}) {
      if (!row.contains(field)) throw Error(where + "missing field " + field);
      if (!row.at(field).is_string()) throw Error(where + "field " + field + " must be a string");
    }
    PromptRecord rec = row.get<PromptRecord>();
    if (rec.id.empty()) throw Error(where + "empty id");
    if (rec.text.empty()) throw Error(where + "empty text");
    if (!ids.insert(rec.id).second) throw Error(where + "duplicate id " + rec.id);
    out.push_back(std::move(rec));
  }
  return out;
}

CollectionResult collect_pairs(Gateway& gateway, const std::vector<PromptRecord>& prompts,
                               const std::string& model_a, const std::string& model_b,
                               const GenerationConfig& gen, std::size_t parallelism) {
  if (model_a == model_b) throw PreconditionError("model_a and model_b must differ");
  gen.validate();
  std::vector<std::optional<Triplet>> slots(prompts.size());
  std::vector<std::string> errors(prompts.size());
  gateway.parallel_for(prompts.size(), parallelism, [&](std::size_t i) {
    const auto& p = prompts[i];
    try {
      ChatRequest req;
      req.user = p.text;
      req.gen = gen;
      req.model = model_a;
      std::string ra = gateway.complete(req).text();
      req.model = model_b;
      std::string rb = gateway.complete(req).text();
      slots[i] = Triplet{p.id, p.text, std::move(ra), std::move(rb), model_a, model_b};
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  CollectionResult result;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (slots[i]) {
      result.triplets.push_back(std::move(*slots[i]));
    } else {
      result.failures.push_back({prompts[i].id, errors[i]});
    }
  }
  if (!prompts.empty() && result.triplets.empty()) {
    throw Error("collection failed for every prompt (first error: " + result.failures.front().error + ")");
  }
  return result;
}

CorpusSplit split_corpus(const std::vector<Triplet>& triplets, std::size_t n_generation, std::size_t n_heldout,
                         std::uint64_t seed) {
  const std::size_t need = n_generation + n_heldout;
  if (need > triplets.size()) {
    throw Error("insufficient triplets: need " + std::to_string(need) + ", have " + std::to_string(triplets.size()));
  }
  std::set<std::string> seen;
  for (const auto& t : triplets) {
    if (!seen.insert(t.prompt_id).second) throw Error("duplicate prompt_id " + t.prompt_id + " in split input");
  }
  std::vector<std::pair<std::string, std::size_t>> order;
  order.reserve(triplets.size());
  const std::string salt = std::to_string(seed) + ":";
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    order.emplace_back(sha256_hex(salt + triplets[i].prompt_id), i);
  }
  std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return triplets[a.second].prompt_id < triplets[b.second].prompt_id;
  });
  // 0 = unused, 1 = generation, 2 = heldout
  std::vector<int> role(triplets.size(), 0);
  for (std::size_t r = 0; r < need; ++r) role[order[r].second] = r < n_generation ? 1 : 2;

  CorpusSplit split;
  split.seed = seed;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    if (role[i] == 1) split.generation.push_back(triplets[i]);
    if (role[i] == 2) split.heldout.push_back(triplets[i]);
  }
  return split;
}

}  // namespace modeldiff
