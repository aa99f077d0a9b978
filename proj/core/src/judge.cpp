#include "modeldiff/judge.hpp"

#include <algorithm>
#include <random>

#include "modeldiff/structured.hpp"

namespace modeldiff {

std::string_view raw_choice_name(RawChoice c) {
  switch (c) {
    case RawChoice::One: return "1";
    case RawChoice::Two: return "2";
    case RawChoice::NotApplicable: return "N/A";
    case RawChoice::Invalid: return "error";
  }
  return "error";
}

RawChoice parse_raw_choice(std::string_view text) {
  if (text == "1") return RawChoice::One;
  if (text == "2") return RawChoice::Two;
  if (text == "N/A") return RawChoice::NotApplicable;
  if (text == "error") return RawChoice::Invalid;
  throw Error("invalid raw_choice '" + std::string(text) + "'");
}

void to_json(json& j, const Verdict& v) {
  j = json{{"hypothesis_id", v.hypothesis_id},
           {"triplet_id", v.triplet_id},
           {"value", v.value ? json(*v.value) : json(nullptr)},
           {"raw_choice", raw_choice_name(v.raw_choice)},
           {"swapped", v.swapped}};
  if (!v.error.empty()) j["error"] = v.error;
}

void from_json(const json& j, Verdict& v) {
  v.hypothesis_id = j.at("hypothesis_id").get<std::string>();
  v.triplet_id = j.at("triplet_id").get<std::string>();
  v.value = j.at("value").is_null() ? std::nullopt : std::optional<int>(j.at("value").get<int>());
  v.raw_choice = parse_raw_choice(j.at("raw_choice").get<std::string>());
  v.swapped = j.at("swapped").get<bool>();
  v.error = j.value("error", std::string{});
}

int resolve_verdict(RawChoice choice, bool swapped, Side direction) {
  if (choice == RawChoice::NotApplicable) return 0;
  if (choice == RawChoice::Invalid) throw PreconditionError("cannot resolve an invalid judge choice");
  // Response 1 shows r^A unless the pair was swapped.
  Side shown = (choice == RawChoice::One) != swapped ? Side::A : Side::B;
  return shown == direction ? 1 : -1;
}

namespace {

std::optional<RawChoice> choice_of(const json& v) {
  if (v.is_number_integer()) {
    auto x = v.get<long long>();
    if (x == 1) return RawChoice::One;
    if (x == 2) return RawChoice::Two;
    return std::nullopt;
  }
  if (v.is_number_float()) {
    double x = v.get<double>();
    if (x == 1.0) return RawChoice::One;
    if (x == 2.0) return RawChoice::Two;
    return std::nullopt;
  }
  if (v.is_string()) {
    const auto& s = v.get_ref<const std::string&>();
    if (s == "N/A") return RawChoice::NotApplicable;
    if (s == "1") return RawChoice::One;
    if (s == "2") return RawChoice::Two;
  }
  return std::nullopt;
}

}  // namespace

PartialJudgeParse parse_judge_partial(const std::string& text, const std::vector<std::string>& labels) {
  PartialJudgeParse out;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error&) {
    for (const auto& l : labels) out.errors[l] = "judge output is not a JSON object";
    return out;
  }
  if (!doc.is_object()) {
    for (const auto& l : labels) out.errors[l] = "judge output is not a JSON object";
    return out;
  }
  for (const auto& l : labels) {
    auto it = doc.find(l);
    if (it == doc.end()) {
      out.errors[l] = "missing " + l;
      continue;
    }
    if (auto c = choice_of(*it)) {
      out.choices[l] = *c;
    } else {
      out.errors[l] = "invalid value for " + l + ": " + it->dump();
    }
  }
  return out;
}

std::map<std::string, RawChoice> parse_judge_output(const std::string& text, const std::vector<std::string>& labels) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error&) {
    throw ParseError("judge output is not a single JSON object", text);
  }
  if (!doc.is_object()) throw ParseError("judge output is not a single JSON object", text);
  for (const auto& [key, value] : doc.items()) {
    if (std::find(labels.begin(), labels.end(), key) == labels.end()) {
      throw ParseError("unexpected key " + key, text);
    }
  }
  auto partial = parse_judge_partial(text, labels);
  for (const auto& l : labels) {
    if (auto e = partial.errors.find(l); e != partial.errors.end()) throw ParseError(e->second, text);
  }
  return partial.choices;
}

bool draw_swap(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return (rng() >> 63) != 0;
}

JudgeRequest make_judge_request(std::vector<Hypothesis> hypotheses, Triplet triplet, std::uint64_t seed) {
  if (hypotheses.empty() || hypotheses.size() > kMaxJudgeBatch) {
    throw PreconditionError("judge batch must hold 1 to 10 hypotheses, got " + std::to_string(hypotheses.size()));
  }
  JudgeRequest req;
  req.hypotheses = std::move(hypotheses);
  req.triplet = std::move(triplet);
  req.rng_seed = seed;
  req.swapped = draw_swap(seed);
  return req;
}

std::string render_judge_prompt(const JudgeRequest& request, const PromptLibrary& prompts) {
  std::string listing;
  for (std::size_t i = 0; i < request.hypotheses.size(); ++i) {
    listing += "H" + std::to_string(i + 1) + ": " + request.hypotheses[i].text + "\n";
  }
  if (!listing.empty()) listing.pop_back();
  const auto& t = request.triplet;
  return prompts.render("judge_user", {{"hypotheses", listing},
                                       {"prompt", t.prompt},
                                       {"response1", request.swapped ? t.response_b : t.response_a},
                                       {"response2", request.swapped ? t.response_a : t.response_b}});
}

std::vector<Verdict> judge_batch(Gateway& gateway, const std::string& judge_model,
                                 const std::vector<Hypothesis>& hypotheses, const Triplet& triplet,
                                 std::uint64_t seed, const GenerationConfig& gen, const PromptLibrary& prompts) {
  auto req = make_judge_request(hypotheses, triplet, seed);
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) labels.push_back("H" + std::to_string(i + 1));

  const std::string& system = prompts.get("judge_system");
  std::string user = render_judge_prompt(req, prompts);
  std::map<std::string, RawChoice> choices;
  std::map<std::string, std::string> errors;
  std::string reply = gateway.complete_text(judge_model, system, user, gen);
  try {
    choices = parse_judge_output(reply, labels);
  } catch (const ParseError&) {
    reply = gateway.complete_text(judge_model, system, user + std::string(kRepromptSuffix), gen);
    try {
      choices = parse_judge_output(reply, labels);
    } catch (const ParseError&) {
      auto partial = parse_judge_partial(reply, labels);
      choices = std::move(partial.choices);
      errors = std::move(partial.errors);
    }
  }

  std::vector<Verdict> out;
  out.reserve(hypotheses.size());
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    Verdict v;
    v.hypothesis_id = hypotheses[i].id;
    v.triplet_id = triplet.prompt_id;
    v.swapped = req.swapped;
    if (auto c = choices.find(labels[i]); c != choices.end()) {
      v.raw_choice = c->second;
      v.value = resolve_verdict(c->second, req.swapped, hypotheses[i].direction);
    } else {
      v.raw_choice = RawChoice::Invalid;
      v.error = errors.count(labels[i]) ? errors[labels[i]] : "missing " + labels[i];
    }
    out.push_back(std::move(v));
  }
  return out;
}

std::uint64_t batch_seed(std::uint64_t run_seed, const std::string& triplet_id, std::size_t batch_index) {
  std::string digest =
      sha256_hex(std::to_string(run_seed) + ":" + triplet_id + ":" + std::to_string(batch_index));
  return std::stoull(digest.substr(0, 16), nullptr, 16);
}

std::vector<Verdict> judge_all(Gateway& gateway, const std::string& judge_model,
                               const std::vector<Hypothesis>& hypotheses, const std::vector<Triplet>& triplets,
                               std::uint64_t seed, const GenerationConfig& gen, std::size_t parallelism,
                               const PromptLibrary& prompts) {
  if (hypotheses.empty() || triplets.empty()) return {};
  const std::size_t n_batches = (hypotheses.size() + kMaxJudgeBatch - 1) / kMaxJudgeBatch;
  const std::size_t tasks = triplets.size() * n_batches;
  std::vector<std::vector<Verdict>> results(tasks);
  gateway.parallel_for(tasks, parallelism, [&](std::size_t k) {
    const Triplet& t = triplets[k / n_batches];
    const std::size_t b = k % n_batches;
    const std::size_t begin = b * kMaxJudgeBatch;
    const std::size_t end = std::min(hypotheses.size(), begin + kMaxJudgeBatch);
    std::vector<Hypothesis> batch(hypotheses.begin() + static_cast<std::ptrdiff_t>(begin),
                                  hypotheses.begin() + static_cast<std::ptrdiff_t>(end));
    const auto s = batch_seed(seed, t.prompt_id, b);
    try {
      results[k] = judge_batch(gateway, judge_model, batch, t, s, gen, prompts);
    } catch (const std::exception& e) {
      bool swapped = draw_swap(s);
      for (const auto& h : batch) {
        Verdict v;
        v.hypothesis_id = h.id;
        v.triplet_id = t.prompt_id;
        v.swapped = swapped;
        v.error = e.what();
        results[k].push_back(std::move(v));
      }
    }
  });
  std::vector<Verdict> out;
  out.reserve(triplets.size() * hypotheses.size());
  for (auto& r : results) {
    for (auto& v : r) out.push_back(std::move(v));
  }
  return out;
}

}  // namespace modeldiff
