#include "scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <regex>

#include <modeldiff/kl_fork.hpp>

namespace modeldiff::scenario {

namespace {

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic uniform draw in [0, 1) keyed by text and purpose.
double unit(std::string_view text, std::string_view salt, std::uint64_t seed) {
  std::uint64_t z = fnv1a64(text) ^ (fnv1a64(salt) * 0x9e3779b97f4a7c15ULL) ^ seed;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return static_cast<double>(z >> 11) * 0x1.0p-53;
}

std::mt19937_64 rng_for(std::string_view text, std::string_view salt, std::uint64_t seed) {
  return std::mt19937_64(fnv1a64(text) ^ (fnv1a64(salt) << 1) ^ seed);
}

const std::vector<std::string> kTopics = {
    "photosynthesis", "compound interest", "the French Revolution", "neural networks", "plate tectonics",
    "vaccination", "supply chains", "black holes", "sourdough baking", "the immune system",
    "blockchain ledgers", "climate models", "the Roman Empire", "quantum entanglement", "urban gardening",
    "jazz harmony", "marathon training", "password managers", "solar panels", "the stock market",
    "protein folding", "medieval castles", "electric cars", "sleep cycles", "coral reefs",
    "game theory", "container shipping", "volcanoes", "language learning", "renewable grids",
    "the printing press", "microplastics", "chess openings", "inflation", "honeybees",
    "database indexing", "mountain weather", "public speaking", "tea ceremonies", "satellite orbits",
    "vertical farming", "rainforests", "retirement savings", "opera history", "bicycle repair",
    "the water cycle", "antibiotic resistance", "typography", "glaciers", "home insulation",
    "migratory birds", "cryptography", "sculpture techniques", "tidal energy", "the Silk Road",
    "gut bacteria", "wind turbines", "ancient Egypt", "noise cancelling", "3D printing"};

const std::vector<std::string> kAspects = {"basics", "history", "common mistakes", "trade-offs", "future",
                                           "costs", "key terms", "practical uses", "risks", "misconceptions"};

const std::vector<std::string> kTemplates = {"Explain the {aspect} of {topic}.",
                                             "Can you walk me through the {aspect} of {topic}?",
                                             "I am new to {topic}. What should I know about its {aspect}?",
                                             "Write a short overview of {topic}, focusing on {aspect}.",
                                             "What are the {aspect} of {topic}?"};

const std::string kMathTemplate = "Give the main formula behind the {aspect} of {topic} and explain it.";

const std::vector<std::string> kWords = {
    "the", "process", "depends", "on", "several", "factors", "that", "interact", "over", "time", "and",
    "it", "helps", "to", "consider", "each", "part", "separately", "before", "combining", "them", "into",
    "a", "clear", "picture", "many", "people", "find", "this", "useful", "when", "they", "start", "with",
    "simple", "examples", "important", "idea", "is", "balance", "between", "cost", "benefit", "in",
    "practice", "small", "changes", "can", "have", "large", "effects", "experts", "often", "recommend",
    "checking", "assumptions", "carefully", "because", "details", "matter", "most", "approach", "works",
    "well", "for", "everyday", "situations", "but", "edge", "cases", "need", "extra", "attention",
    "overall", "result", "stays", "stable", "under", "normal", "conditions"};

std::string sentence(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(8, 14);
  std::uniform_int_distribution<std::size_t> pick(0, kWords.size() - 1);
  int n = len(rng);
  std::string s;
  for (int i = 0; i < n; ++i) {
    std::string w = kWords[pick(rng)];
    if (i == 0) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
    if (i > 0) s += ' ';
    s += w;
  }
  return s + ".";
}

std::string fill(std::string tmpl, const std::string& key, const std::string& value) {
  auto pos = tmpl.find(key);
  if (pos != std::string::npos) tmpl.replace(pos, key.size(), value);
  return tmpl;
}

std::string topic_of(const std::string& prompt) {
  for (const auto& t : kTopics) {
    if (prompt.find(t) != std::string::npos) return t;
  }
  return "the topic";
}

// Text between `start` and `end` markers (end optional).
std::string section(const std::string& text, const std::string& start, const std::string& end) {
  auto b = text.find(start);
  if (b == std::string::npos) return {};
  b += start.size();
  auto e = end.empty() ? std::string::npos : text.find(end, b);
  return trim(text.substr(b, e == std::string::npos ? std::string::npos : e - b));
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::string line;
  for (char c : text) {
    if (c == '\n') {
      out.push_back(line);
      line.clear();
    } else {
      line.push_back(c);
    }
  }
  if (!line.empty()) out.push_back(line);
  return out;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool contains(const std::string& text, std::string_view needle) { return text.find(needle) != std::string::npos; }

Completion single(std::string text) {
  Completion c;
  c.samples.push_back({std::move(text), std::nullopt});
  return c;
}

// ---- role responders -------------------------------------------------------------

Completion answer(const ChatRequest& req, Side side, const Options& opt) {
  if (req.assistant_prefix) {
    // Continuations sampled at a fork: A writes display math with $$, B with $.
    Completion c;
    static const std::vector<std::string> tails = {"where each symbol keeps its usual meaning.",
                                                   "which links the quantities directly.",
                                                   "and the rest follows from it.",
                                                   "so the relation is easy to check.",
                                                   "as the standard form shows."};
    for (int i = 0; i < req.gen.n_samples; ++i) {
      const std::string& tail = tails[static_cast<std::size_t>(i) % tails.size()];
      std::string x = "x_" + std::to_string(i);
      c.samples.push_back({side == Side::A ? "$$ " + x + " = f(t) $$ " + tail : "$ " + x + " = f(t) $ " + tail,
                           std::nullopt});
    }
    return c;
  }
  return single(side == Side::A ? response_a(req.user, opt) : response_b(req.user, opt));
}

std::string ref_of(const std::string& prompt) { return "[ref " + sha256_hex(prompt).substr(0, 8) + "]"; }

Completion extract(const ChatRequest& req) {
  const std::string& u = req.user;
  std::string prompt = section(u, "**User Prompt:**\n", "\n\n**Model A Response:**");
  std::string a = section(u, "**Model A Response:**\n", "\n\n**Model B Response:**");
  std::string b = section(u, "**Model B Response:**\n", "\n\nList the differences");
  const std::string ref = ref_of(prompt);
  const std::size_t ta = count_tokens(a);
  const std::size_t tb = count_tokens(b);

  json diffs = json::array();
  if (tb > 2 * ta) {
    diffs.push_back("Model A gives a much shorter and more concise answer " + ref);
    if (unit(prompt, "long", 0) < 0.5) diffs.push_back("Model B gives a longer and more detailed explanation " + ref);
  } else if (ta > 2 * tb) {
    diffs.push_back("Model B gives a much shorter and more concise answer " + ref);
  }
  if (has_table(b) && !has_table(a)) diffs.push_back("Model B presents part of the answer as a Markdown table " + ref);
  if (has_table(a) && !has_table(b)) diffs.push_back("Model A presents part of the answer as a Markdown table " + ref);
  if (contains(a, "$$") && !contains(b, "$$")) diffs.push_back("Model A writes display math between double dollar signs " + ref);
  if (contains(b, "$$") && !contains(a, "$$")) diffs.push_back("Model B writes display math between double dollar signs " + ref);
  if (unit(prompt, "noise", 0) < 0.6) {
    static const std::vector<std::string> themes = {"adopts a more formal tone", "adds an emoji",
                                                    "closes with a follow-up question"};
    auto theme = themes[static_cast<std::size_t>(unit(prompt, "theme", 0) * 3.0)];
    std::string who = unit(prompt, "side", 0) < 0.5 ? "Model A " : "Model B ";
    diffs.push_back(who + theme + " " + ref);
  }
  if (unit(prompt, "both", 0) < 0.1) diffs.push_back("Model A and Model B both organize the answer into paragraphs");
  return single(json{{"differences", diffs}}.dump());
}

struct Theme {
  const char* keyword;
  const char* hypothesis;
};

const std::vector<Theme>& themes() {
  static const std::vector<Theme> t = {{"table", "Uses Markdown tables to present information"},
                                       {"dollar", "Writes display math between double dollar signs"},
                                       {"shorter", "Provides short and concise answers"},
                                       {"longer", "Provides long and detailed explanations"},
                                       {"formal", "Adopts a formal tone"},
                                       {"emoji", "Adds emoji to responses"},
                                       {"follow-up", "Closes with a follow-up question"}};
  return t;
}

Completion summarize(const ChatRequest& req) {
  std::string listing = section(req.user, "Descriptions:\n", "\n\nIdentify the shared theme");
  auto lines = lines_of(listing);
  std::vector<std::size_t> votes(themes().size(), 0);
  for (const auto& l : lines) {
    for (std::size_t k = 0; k < themes().size(); ++k) {
      if (contains(lower(l), themes()[k].keyword)) ++votes[k];
    }
  }
  auto best = std::max_element(votes.begin(), votes.end());
  if (*best > 0) return single(themes()[static_cast<std::size_t>(best - votes.begin())].hypothesis);
  std::string first = lines.empty() ? "" : lines.front();
  if (first.rfind("- ", 0) == 0) first = first.substr(2);
  return single(claim_from_neutral(first));
}

// Which displayed response better fits `hypothesis`: 1, 2, or 0 for N/A.
int judge_one(const std::string& hypothesis, const std::string& r1, const std::string& r2) {
  const std::string h = lower(hypothesis);
  auto pick = [](bool x1, bool x2) { return x1 == x2 ? 0 : (x1 ? 1 : 2); };
  const double t1 = static_cast<double>(count_tokens(r1));
  const double t2 = static_cast<double>(count_tokens(r2));
  const bool clear_gap = std::max(t1, t2) >= 1.5 * std::max(1.0, std::min(t1, t2));
  if (contains(h, "table")) return pick(has_table(r1), has_table(r2));
  if (contains(h, "dollar")) return pick(contains(r1, "$$"), contains(r2, "$$"));
  if (contains(h, "short") || contains(h, "concise") || contains(h, "brief")) return clear_gap ? (t1 < t2 ? 1 : 2) : 0;
  if (contains(h, "long") || contains(h, "detailed")) return clear_gap ? (t1 > t2 ? 1 : 2) : 0;
  return 0;
}

Completion judge(const ChatRequest& req) {
  const std::string& u = req.user;
  auto hyps = lines_of(section(u, "**Hypotheses:**\n", "\n\n**User Prompt:**"));
  std::string r1 = section(u, "**Model 1 Response:**\n", "\n\n**Model 2 Response:**");
  std::string r2 = section(u, "**Model 2 Response:**\n", "\n\nReturn exactly one JSON object");
  json out = json::object();
  for (const auto& line : hyps) {
    auto colon = line.find(": ");
    if (colon == std::string::npos) continue;
    int choice = judge_one(line.substr(colon + 2), r1, r2);
    out[line.substr(0, colon)] = choice == 0 ? json("N/A") : json(choice);
  }
  return single(out.dump());
}

Completion rater(const ChatRequest& req, int offset) {
  const bool interest = req.system && contains(*req.system, "Interestingness Autorater");
  const std::string h = lower(section(req.user, "Candidate hypothesis:\n", ""));
  int base = 2;
  if (contains(h, "table")) {
    base = interest ? 2 : 3;
  } else if (contains(h, "dollar")) {
    base = 1;
  } else if (contains(h, "short") || contains(h, "brief") || contains(h, "long")) {
    base = interest ? 3 : 4;
  }
  int score = std::clamp(base + offset, 1, 5);
  json out{{"score", score},
           {"rationale", "Scored against the rubric.\nCalibrated on the examples."},
           {"signals", {{"impact", score}, {"novelty", score}, {"specificity", 3}, {"actionability", 3}}}};
  return single(out.dump());
}

// Splits a "1. ...\n2. ..." listing whose items may span several lines.
std::vector<std::string> numbered_items(const std::string& listing) {
  static const std::regex marker(R"((^|\n)\d+\. )");
  std::vector<std::string> out;
  std::sregex_iterator it(listing.begin(), listing.end(), marker);
  std::sregex_iterator end;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // item start, marker start
  for (; it != end; ++it) spans.emplace_back(static_cast<std::size_t>(it->position() + it->length()),
                                             static_cast<std::size_t>(it->position()));
  for (std::size_t i = 0; i < spans.size(); ++i) {
    std::size_t stop = i + 1 < spans.size() ? spans[i + 1].second : listing.size();
    out.push_back(listing.substr(spans[i].first, stop - spans[i].first));
  }
  return out;
}

Completion relabel(const ChatRequest& req) {
  std::string current = section(req.user, "Current label: ", "\n");
  auto positives = numbered_items(section(req.user, "Positive examples:\n", "\n\nNegative examples:"));
  std::size_t table = 0;
  std::size_t math = 0;
  for (const auto& p : positives) {
    table += has_table(p) ? 1 : 0;
    math += contains(p, "$$") ? 1 : 0;
  }
  const std::size_t half = (positives.size() + 1) / 2;
  if (table >= half && table > 0) return single("Markdown table rows with pipe separators");
  if (math >= half && math > 0) return single("display math between double dollar signs");
  return single(current == "(none)" ? "unclear pattern" : current);
}

Completion sae_summarize(const ChatRequest& req) {
  auto lines = lines_of(section(req.user, "Features:\n", "\n\nWrite at most"));
  const int n = std::stoi(section(req.user, "Write at most ", " hypotheses"));
  struct Group {
    std::string label;
    std::string side;
    std::vector<long long> ids;
  };
  std::vector<Group> groups;
  for (const auto& l : lines) {
    // feature <id> | favors Model <X> | diff <d> | <label>
    auto parts = std::vector<std::string>{};
    std::size_t start = 0;
    while (true) {
      auto bar = l.find(" | ", start);
      parts.push_back(l.substr(start, bar == std::string::npos ? std::string::npos : bar - start));
      if (bar == std::string::npos || parts.size() == 4) {
        if (bar != std::string::npos) parts.back() = l.substr(start);
        break;
      }
      start = bar + 3;
    }
    if (parts.size() < 4) continue;
    if (std::abs(std::stod(parts[2].substr(5))) < 0.1) continue;
    long long id = std::stoll(parts[0].substr(8));
    std::string side = parts[1].substr(parts[1].size() - 1);
    auto g = std::find_if(groups.begin(), groups.end(),
                          [&](const Group& x) { return x.label == parts[3] && x.side == side; });
    if (g == groups.end()) {
      groups.push_back({parts[3], side, {id}});
    } else {
      g->ids.push_back(id);
    }
  }
  json hyps = json::array();
  for (const auto& g : groups) {
    if (static_cast<int>(hyps.size()) >= n) break;
    hyps.push_back({{"text", "Shows " + g.label}, {"features", g.ids}});
  }
  return single(json{{"hypotheses", hyps}}.dump());
}

Completion phrase(const ChatRequest& req) {
  std::string h = section(req.user, "Hypothesis: ", "\n");
  if (!h.empty()) h[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(h[0])));
  return single(h);
}

Completion kl_hypothesize(const ChatRequest& req) {
  auto a = lines_of(section(req.user, "**Model A continuations:**\n", "\n\n**Model B continuations:**"));
  auto b = lines_of(section(req.user, "**Model B continuations:**\n", "\n\nDescribe systematic"));
  auto all_have = [](const std::vector<std::string>& xs) {
    return !xs.empty() && std::all_of(xs.begin(), xs.end(), [](const std::string& x) { return contains(x, "$$"); });
  };
  auto none_have = [](const std::vector<std::string>& xs) {
    return std::none_of(xs.begin(), xs.end(), [](const std::string& x) { return contains(x, "$$"); });
  };
  json diffs = json::array();
  if (all_have(a) && none_have(b)) diffs.push_back("Model A consistently uses double dollar signs to delimit math");
  if (all_have(b) && none_have(a)) diffs.push_back("Model B consistently uses double dollar signs to delimit math");
  return single(json{{"differences", diffs}}.dump());
}

}  // namespace

// ---- corpus --------------------------------------------------------------------------

std::vector<PromptRecord> make_prompts(const Options& opt) {
  const std::size_t combos = kTopics.size() * kAspects.size() * kTemplates.size();
  if (opt.n_prompts > combos) throw PreconditionError("scenario supports at most " + std::to_string(combos) + " prompts");
  std::vector<std::size_t> order(combos);
  for (std::size_t i = 0; i < combos; ++i) order[i] = i;
  std::mt19937_64 rng(opt.seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<PromptRecord> out;
  for (std::size_t i = 0; i < opt.n_prompts; ++i) {
    const std::size_t k = order[i];
    const auto& topic = kTopics[k % kTopics.size()];
    const auto& aspect = kAspects[(k / kTopics.size()) % kAspects.size()];
    const auto& tmpl = kTemplates[k / (kTopics.size() * kAspects.size())];
    char id[32];
    std::snprintf(id, sizeof id, "p%04zu", i + 1);
    const bool math = unit(id, "math", opt.seed) < opt.math_rate;
    std::string text = fill(fill(math ? kMathTemplate : tmpl, "{aspect}", aspect), "{topic}", topic);
    PromptRecord rec{id, text, {{"source", "scenario"}, {"kind", math ? "math" : "general"}}};
    out.push_back(std::move(rec));
  }
  return out;
}

bool wants_table(const std::string& prompt, const Options& opt) { return unit(prompt, "table", opt.seed) < opt.table_rate; }

bool is_math_prompt(const std::string& prompt) { return contains(prompt, "formula"); }

bool has_table(const std::string& text) { return contains(text, "| --- |"); }

std::string response_a(const std::string& prompt, const Options& opt) {
  auto rng = rng_for(prompt, "A", opt.seed);
  std::uniform_int_distribution<int> target(opt.tokens_a - 12, opt.tokens_a + 12);
  const int n = target(rng);
  std::string text = "Here is a brief answer about " + topic_of(prompt) + ".";
  if (is_math_prompt(prompt)) text += " The key relation is $$ y = f(x) $$ in display form.";
  while (static_cast<int>(count_tokens(text)) < n) text += " " + sentence(rng);
  return text;
}

std::string response_b(const std::string& prompt, const Options& opt) {
  auto rng = rng_for(prompt, "B", opt.seed);
  std::uniform_int_distribution<int> target(opt.tokens_b - 40, opt.tokens_b + 40);
  const int n = target(rng);
  std::string text = "Great question! Let us look at " + topic_of(prompt) + " in detail.";
  if (is_math_prompt(prompt)) text += " The key relation is $ y = f(x) $ written inline.";
  int in_paragraph = 0;
  bool table_done = !wants_table(prompt, opt);
  while (static_cast<int>(count_tokens(text)) < n) {
    text += (in_paragraph == 5 ? "\n\n" : " ") + sentence(rng);
    in_paragraph = in_paragraph == 5 ? 1 : in_paragraph + 1;
    if (!table_done && count_tokens(text) > 40) {
      text += "\n\n| Aspect | Summary |\n| --- | --- |\n| Scope | Broad |\n| Effort | Moderate |\n\n";
      text += sentence(rng);
      in_paragraph = 1;
      table_done = true;
    }
  }
  return text;
}

void install_responders(MockBackend& backend, const Options& opt) {
  backend.set_responder(models::kA, [opt](const ChatRequest& r) { return answer(r, Side::A, opt); });
  backend.set_responder(models::kB, [opt](const ChatRequest& r) { return answer(r, Side::B, opt); });
  backend.set_responder(models::kExtractor, extract);
  backend.set_responder(models::kSummarizer, summarize);
  backend.set_responder(models::kJudge, judge);
  const int offsets[] = {0, 1, -1};
  for (std::size_t i = 0; i < models::kRaters.size(); ++i) {
    int off = offsets[i % 3];
    backend.set_responder(models::kRaters[i], [off](const ChatRequest& r) { return rater(r, off); });
  }
  backend.set_responder(models::kRelabeler, relabel);
  backend.set_responder(models::kSaeSummarizer, sae_summarize);
  backend.set_responder(models::kPhrasing, phrase);
  backend.set_responder(models::kKlHypothesizer, kl_hypothesize);
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t start = i;
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    out.push_back(text.substr(start, i - start));
  }
  return out;
}

// ---- offline artifacts -----------------------------------------------------------------

namespace {

constexpr FeatureId kTableFeature = 101;
constexpr FeatureId kLongFeature = 202;
constexpr FeatureId kBriefFeature = 303;
constexpr FeatureId kMathFeature = 404;
constexpr FeatureId kTemplateFeature = 555;
constexpr FeatureId kNoiseFeatures = 60;

const std::map<FeatureId, std::string>& planted_labels() {
  static const std::map<FeatureId, std::string> labels = {{kTableFeature, "pipe characters"},
                                                          {kLongFeature, "long multi-paragraph explanations"},
                                                          {kBriefFeature, "brief direct answers"},
                                                          {kMathFeature, "dollar signs"},
                                                          {kTemplateFeature, "chat template tokens"}};
  return labels;
}

TokenLogprob tl(std::string token, double p) { return {std::move(token), std::log(p)}; }

std::vector<TokenLogprob> ordinary_top(const std::string& token, double p_top) {
  static const std::vector<std::string> alts = {" and", " of", " or", " to"};
  std::vector<TokenLogprob> out = {tl(token, p_top)};
  double rest[] = {(1.0 - p_top) * 0.75, (1.0 - p_top) * 0.25};
  std::size_t k = 0;
  for (const auto& a : alts) {
    if (a == token || k == 2) continue;
    out.push_back(tl(a, rest[k++]));
  }
  return out;
}

}  // namespace

ActivationDump make_sae_dump(const std::vector<PromptRecord>& prompts, Side side, const Options& opt) {
  ActivationDump dump;
  for (const auto& p : prompts) {
    const std::string response = side == Side::A ? response_a(p.text, opt) : response_b(p.text, opt);
    const std::size_t start = count_tokens(p.text) + 4;  // chat template overhead
    const std::size_t total = start + count_tokens(response);
    const std::size_t idx = dump.texts.size();
    dump.texts.push_back({p.id, start, total});
    auto rng = rng_for(p.id, side == Side::A ? "saeA" : "saeB", opt.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pos(start, total - 1);
    auto add = [&](std::size_t token, FeatureId f, double v) { dump.entries.push_back({idx, token, f, v}); };

    add(0, kTemplateFeature, 1.0);
    if (side == Side::B && has_table(response)) add(start + 45, kTableFeature, 3.0);
    if (u(rng) < (side == Side::B ? 0.9 : 0.1)) add(pos(rng), kLongFeature, 1.5 + u(rng));
    if (u(rng) < (side == Side::A ? 0.85 : 0.05)) add(pos(rng), kBriefFeature, 1.0 + u(rng));
    if (side == Side::A && is_math_prompt(p.text)) add(start + 12, kMathFeature, 2.0);
    for (FeatureId f = 1; f <= kNoiseFeatures; ++f) {
      double rate = 0.05 + 0.25 * static_cast<double>(f) / kNoiseFeatures;
      if (u(rng) < rate) add(pos(rng), f, 0.5 + u(rng));
    }
  }
  dump.validate();
  return dump;
}

void write_inputs(const std::filesystem::path& dir, const Options& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto prompts = make_prompts(opt);
  write_jsonl_from(dir / "prompts.jsonl", prompts);
  save_activations(dir / "sae_a.jsonl", make_sae_dump(prompts, Side::A, opt));
  save_activations(dir / "sae_b.jsonl", make_sae_dump(prompts, Side::B, opt));

  std::vector<json> labels;
  for (const auto& [f, label] : planted_labels()) labels.push_back({{"feature", f}, {"label", label}});
  for (FeatureId f = 1; f <= kNoiseFeatures; ++f) {
    labels.push_back({{"feature", f}, {"label", "common words, group " + std::to_string(f)}});
  }
  write_jsonl(dir / "sae_labels.jsonl", labels);

  const fs::path kl_dir = dir / "kl_dumps";
  fs::create_directories(kl_dir);
  for (const auto& p : prompts) {
    if (!is_math_prompt(p.text)) continue;
    auto tokens = tokenize(response_a(p.text, opt));
    LogprobDump gen;
    LogprobDump other;
    bool fork_done = false;
    for (const auto& t : tokens) {
      gen.tokens.push_back(t);
      other.tokens.push_back(t);
      if (!fork_done && t == " $$") {
        gen.per_position.push_back({tl(" $$", 0.9), tl(" $", 0.08), tl(" \\[", 0.02)});
        other.per_position.push_back({tl(" $", 0.85), tl(" $$", 0.1), tl(" \\(", 0.05)});
        fork_done = true;
      } else {
        gen.per_position.push_back(ordinary_top(t, 0.6));
        other.per_position.push_back(ordinary_top(t, 0.55));
      }
    }
    save_fork_dump(kl_dir / (p.id + ".jsonl"), gen, other);
  }

  std::string raters;
  for (const auto& r : models::kRaters) raters += (raters.empty() ? "" : ",") + r;
  std::string ini =
      "[models]\n"
      "a = " + models::kA + "\n"
      "b = " + models::kB + "\n"
      "extractor = " + models::kExtractor + "\n"
      "summarizer = " + models::kSummarizer + "\n"
      "judge = " + models::kJudge + "\n"
      "raters = " + raters + "\n"
      "relabeler = " + models::kRelabeler + "\n"
      "sae_summarizer = " + models::kSaeSummarizer + "\n"
      "phrasing = " + models::kPhrasing + "\n"
      "kl_hypothesizer = " + models::kKlHypothesizer + "\n"
      "\n[corpus]\n"
      "prompts = prompts.jsonl\n"
      "n_generation = " + std::to_string(opt.n_generation) + "\n"
      "n_heldout = " + std::to_string(opt.n_heldout) + "\n"
      "max_new_tokens = 1024\n"
      "\n[diff_llm]\n"
      "min_cluster_size = 8\n"
      "direction_threshold = 0.65\n"
      "\n[diff_sae]\n"
      "dump_a = sae_a.jsonl\n"
      "dump_b = sae_b.jsonl\n"
      "labels = sae_labels.jsonl\n"
      "n_hypotheses = 40\n"
      "\n[kl_fork]\n"
      "dump_dir = kl_dumps\n"
      "top_n = 5\n"
      "samples = 20\n"
      "include_in_eval = true\n"
      "\n[provider]\n"
      "supports_prefill = true\n"
      "\n[run]\n"
      "seed = " + std::to_string(opt.seed) + "\n"
      "parallelism = 8\n";
  write_text(dir / "config.ini", ini);
}

std::shared_ptr<MockBackend> make_backend(const Options& opt) {
  auto backend = std::make_shared<MockBackend>();
  install_responders(*backend, opt);
  return backend;
}

std::shared_ptr<Gateway> make_gateway(std::shared_ptr<Backend> backend, std::size_t parallelism) {
  GatewayOptions options;
  options.parallelism = parallelism;
  auto gateway = std::make_shared<Gateway>(options);
  std::vector<std::string> ids = {models::kA,        models::kB,         models::kExtractor,     models::kSummarizer,
                                  models::kJudge,    models::kRelabeler, models::kSaeSummarizer, models::kPhrasing,
                                  models::kKlHypothesizer};
  ids.insert(ids.end(), models::kRaters.begin(), models::kRaters.end());
  for (const auto& id : ids) gateway->register_model(id, backend);
  gateway->set_embedder(backend);
  return gateway;
}

}  // namespace modeldiff::scenario
