#include "modeldiff/diff_sae.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <unordered_map>

#include "modeldiff/structured.hpp"

namespace modeldiff {

// ---- dumps ------------------------------------------------------------------

void ActivationDump::validate() const {
  std::set<std::string> ids;
  for (const auto& t : texts) {
    if (!ids.insert(t.text_id).second) throw Error("duplicate text_id " + t.text_id);
    if (t.completion_start > t.total_tokens) {
      throw Error("text " + t.text_id + ": completion_start exceeds total_tokens");
    }
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const std::string where = "entry " + std::to_string(i) + ": ";
    if (e.text >= texts.size()) throw Error(where + "unknown text");
    if (e.token >= texts[e.text].total_tokens) throw Error(where + "token index out of range");
    if (!(e.value >= 0.0)) throw Error(where + "negative activation");
  }
}

ActivationDump load_activations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open activation dump " + path.string());
  ActivationDump dump;
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path.filename().string() + " line " + std::to_string(line_no) + ": ";
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error&) {
      throw Error(where + "malformed JSON");
    }
    try {
      if (!have_header) {
        for (const auto& t : row.at("texts")) {
          TextSpan span{t.at("text_id").get<std::string>(), t.at("completion_start").get<std::size_t>(),
                        t.at("total_tokens").get<std::size_t>()};
          if (span.completion_start > span.total_tokens) {
            throw Error(where + "text " + span.text_id + ": completion_start exceeds total_tokens");
          }
          if (!index.emplace(span.text_id, dump.texts.size()).second) {
            throw Error(where + "duplicate text_id " + span.text_id);
          }
          dump.texts.push_back(std::move(span));
        }
        have_header = true;
        continue;
      }
      auto id = row.at("text_id").get<std::string>();
      auto it = index.find(id);
      if (it == index.end()) throw Error(where + "unknown text_id " + id);
      if (row.at("token").get<long long>() < 0) throw Error(where + "negative token index");
      ActivationEntry e;
      e.text = it->second;
      e.token = row.at("token").get<std::size_t>();
      e.feature = row.at("feature").get<FeatureId>();
      e.value = row.at("value").get<double>();
      if (!(e.value >= 0.0)) throw Error(where + "negative activation");
      if (e.token >= dump.texts[e.text].total_tokens) {
        throw Error(where + "token " + std::to_string(e.token) + " >= total_tokens " +
                    std::to_string(dump.texts[e.text].total_tokens));
      }
      dump.entries.push_back(e);
    } catch (const json::exception& e) {
      throw Error(where + e.what());
    }
  }
  if (!have_header) throw Error(path.string() + ": missing header line");
  return dump;
}

void save_activations(const std::filesystem::path& path, const ActivationDump& dump) {
  std::vector<json> rows;
  json texts = json::array();
  for (const auto& t : dump.texts) {
    texts.push_back({{"text_id", t.text_id}, {"completion_start", t.completion_start}, {"total_tokens", t.total_tokens}});
  }
  rows.push_back({{"texts", std::move(texts)}});
  for (const auto& e : dump.entries) {
    rows.push_back({{"text_id", dump.texts[e.text].text_id}, {"token", e.token}, {"feature", e.feature}, {"value", e.value}});
  }
  write_jsonl(path, rows);
}

// ---- pooling and frequencies --------------------------------------------------

std::optional<double> PooledMatrix::get(std::size_t row, FeatureId feature) const {
  auto it = values.at(row).find(feature);
  if (it == values[row].end()) return std::nullopt;
  return it->second;
}

PooledMatrix pool_completion(const ActivationDump& dump) {
  PooledMatrix out;
  out.rows.reserve(dump.texts.size());
  for (const auto& t : dump.texts) out.rows.push_back(t.text_id);
  out.values.resize(dump.texts.size());
  for (const auto& e : dump.entries) {
    if (e.token < dump.texts[e.text].completion_start || e.value <= 0.0) continue;
    auto& slot = out.values[e.text][e.feature];
    slot = std::max(slot, e.value);
  }
  return out;
}

void to_json(json& j, const FeatureStats& f) {
  j = json{{"feature_id", f.feature_id}, {"active_a", f.active_a}, {"active_b", f.active_b},
           {"freq_a", f.freq_a},         {"freq_b", f.freq_b},     {"diff", f.diff}};
  j["label"] = f.label ? json(*f.label) : json(nullptr);
}

void from_json(const json& j, FeatureStats& f) {
  f.feature_id = j.at("feature_id").get<FeatureId>();
  f.active_a = j.value("active_a", std::size_t{0});
  f.active_b = j.value("active_b", std::size_t{0});
  f.freq_a = j.at("freq_a").get<double>();
  f.freq_b = j.at("freq_b").get<double>();
  f.diff = j.at("diff").get<double>();
  if (j.contains("label") && !j.at("label").is_null()) f.label = j.at("label").get<std::string>();
}

std::vector<FeatureStats> feature_frequency_diff(const PooledMatrix& pooled_a, const PooledMatrix& pooled_b) {
  if (pooled_a.rows.empty() || pooled_b.rows.empty()) {
    throw PreconditionError("feature_frequency_diff needs at least one text per model");
  }
  std::map<FeatureId, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& row : pooled_a.values) {
    for (const auto& [f, v] : row) {
      if (v > 0.0) ++counts[f].first;
    }
  }
  for (const auto& row : pooled_b.values) {
    for (const auto& [f, v] : row) {
      if (v > 0.0) ++counts[f].second;
    }
  }
  const double na = static_cast<double>(pooled_a.rows.size());
  const double nb = static_cast<double>(pooled_b.rows.size());
  std::vector<FeatureStats> out;
  out.reserve(counts.size());
  for (const auto& [f, c] : counts) {
    FeatureStats s;
    s.feature_id = f;
    s.active_a = c.first;
    s.active_b = c.second;
    s.freq_a = static_cast<double>(c.first) / na;
    s.freq_b = static_cast<double>(c.second) / nb;
    s.diff = s.freq_a - s.freq_b;
    out.push_back(s);
  }
  return out;
}

std::vector<FeatureStats> select_candidates(std::vector<FeatureStats> stats, std::size_t k) {
  if (k < 1) throw PreconditionError("select_candidates: k must be >= 1");
  auto better = [](const FeatureStats& x, const FeatureStats& y) {
    double ax = std::abs(x.diff);
    double ay = std::abs(y.diff);
    if (ax != ay) return ax > ay;
    return x.feature_id < y.feature_id;
  };
  if (stats.size() > k) {
    std::partial_sort(stats.begin(), stats.begin() + static_cast<std::ptrdiff_t>(k), stats.end(), better);
    stats.resize(k);
  } else {
    std::sort(stats.begin(), stats.end(), better);
  }
  return stats;
}

// ---- relabeling ---------------------------------------------------------------

namespace {

constexpr int kExampleTokens = 200;

std::string numbered(const std::vector<std::string>& items) {
  if (items.empty()) return "(none)";
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    out += std::to_string(i + 1) + ". " + truncate_tokens(items[i], kExampleTokens) + "\n";
  }
  out.pop_back();
  return out;
}

std::string strip_quotes(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = trim(s.substr(1, s.size() - 2));
  return s;
}

}  // namespace

FeatureExamples collect_examples(FeatureId feature, const PooledMatrix& pooled_a, const PooledMatrix& pooled_b,
                                 const std::function<std::optional<std::string>(Side, const std::string&)>& text_of,
                                 std::size_t n_positive, std::size_t n_negative) {
  struct Hit {
    double value;
    Side side;
    std::size_t row;
  };
  std::vector<Hit> hits;
  for (Side side : {Side::A, Side::B}) {
    const auto& m = side == Side::A ? pooled_a : pooled_b;
    for (std::size_t r = 0; r < m.rows.size(); ++r) {
      if (auto v = m.get(r, feature)) hits.push_back({*v, side, r});
    }
  }
  std::sort(hits.begin(), hits.end(), [](const Hit& x, const Hit& y) {
    if (x.value != y.value) return x.value > y.value;
    if (x.side != y.side) return x.side == Side::A;
    return x.row < y.row;
  });
  FeatureExamples out;
  for (const auto& h : hits) {
    if (out.positives.size() >= n_positive) break;
    const auto& m = h.side == Side::A ? pooled_a : pooled_b;
    if (auto t = text_of(h.side, m.rows[h.row])) out.positives.push_back(std::move(*t));
  }
  const std::size_t rows = std::max(pooled_a.rows.size(), pooled_b.rows.size());
  for (std::size_t r = 0; r < rows && out.negatives.size() < n_negative; ++r) {
    for (Side side : {Side::A, Side::B}) {
      const auto& m = side == Side::A ? pooled_a : pooled_b;
      if (r >= m.rows.size() || m.get(r, feature) || out.negatives.size() >= n_negative) continue;
      if (auto t = text_of(side, m.rows[r])) out.negatives.push_back(std::move(*t));
    }
  }
  return out;
}

std::string relabel_feature(Gateway& gateway, const std::string& model, FeatureStats& feature,
                            const std::vector<std::string>& positives, const std::vector<std::string>& negatives,
                            const GenerationConfig& gen, std::vector<std::string>& warnings,
                            const PromptLibrary& prompts) {
  if (positives.empty()) throw PreconditionError("relabel_feature needs at least one positive example");
  std::string user = prompts.render("sae_relabel", {{"label", feature.label.value_or("(none)")},
                                                    {"positives", numbered(positives)},
                                                    {"negatives", numbered(negatives)}});
  std::string reply = trim(gateway.complete_text(model, std::nullopt, user, gen));
  if (auto nl = reply.find('\n'); nl != std::string::npos) reply = reply.substr(0, nl);
  reply = strip_quotes(reply);
  if (reply.empty()) {
    warnings.push_back("relabeler returned an empty label for feature " + std::to_string(feature.feature_id) +
                       "; keeping the previous label");
    return feature.label.value_or("");
  }
  feature.label = reply;
  return reply;
}

// ---- summarization ------------------------------------------------------------

SaeSummary parse_sae_summary(const std::string& text, const std::vector<FeatureStats>& candidates, std::size_t n) {
  json doc;
  try {
    doc = json::parse(strip_code_fence(text));
  } catch (const json::parse_error&) {
    throw ParseError("summary is not JSON", text);
  }
  if (!doc.is_object() || !doc.contains("hypotheses") || !doc["hypotheses"].is_array()) {
    throw ParseError("expected {\"hypotheses\": [...]}", text);
  }
  std::map<FeatureId, const FeatureStats*> by_id;
  for (const auto& c : candidates) by_id[c.feature_id] = &c;

  SaeSummary out;
  for (const auto& item : doc["hypotheses"]) {
    if (out.hypotheses.size() >= n) break;
    if (!item.is_object() || !item.contains("text") || !item["text"].is_string() || !item.contains("features") ||
        !item["features"].is_array() || item["features"].empty()) {
      throw ParseError("each hypothesis needs a text and a non-empty features list", text);
    }
    std::string claim = strip_quotes(item["text"].get<std::string>());
    if (!claim.empty() && claim.back() == '.') claim.pop_back();
    if (claim.empty()) throw ParseError("empty hypothesis text", text);
    std::vector<FeatureId> ids;
    std::optional<Side> side;
    for (const auto& f : item["features"]) {
      if (!f.is_number_integer()) throw ParseError("feature ids must be integers", text);
      auto id = f.get<FeatureId>();
      auto it = by_id.find(id);
      if (it == by_id.end()) throw ParseError("unknown feature id " + std::to_string(id), text);
      Side s = it->second->favored();
      if (side && *side != s) throw ParseError("hypothesis merges features favoring different models", text);
      side = s;
      ids.push_back(id);
    }
    Hypothesis h;
    h.id = make_id("sae", out.hypotheses.size() + 1);
    h.text = std::move(claim);
    h.direction = *side;
    h.method = Method::Sae;
    h.support = ids.size();
    h.majority_fraction = 1.0;
    out.features_of[h.id] = std::move(ids);
    out.hypotheses.push_back(std::move(h));
  }
  return out;
}

SaeSummary summarize_to_hypotheses(Gateway& gateway, const std::string& model,
                                   const std::vector<FeatureStats>& candidates, std::size_t n,
                                   const GenerationConfig& gen, const PromptLibrary& prompts) {
  std::string listing;
  for (const auto& c : candidates) {
    if (!c.label) throw PreconditionError("candidate feature " + std::to_string(c.feature_id) + " has no label");
    char diff[32];
    std::snprintf(diff, sizeof diff, "%+.3f", c.diff);
    listing += "feature " + std::to_string(c.feature_id) + " | favors Model " + side_char(c.favored()) + " | diff " +
               diff + " | " + *c.label + "\n";
  }
  if (!listing.empty()) listing.pop_back();
  if (candidates.empty()) return {};
  std::string user = prompts.render("sae_summarize", {{"features", listing}, {"n", std::to_string(n)}});
  return ask_parsed(gateway, model, std::nullopt, user, gen,
                    [&](const std::string& reply) { return parse_sae_summary(reply, candidates, n); });
}

// ---- phrasing -------------------------------------------------------------------

namespace {

int polarity_mask(std::string_view text) {
  static const std::set<std::string> up = {"more", "greater", "higher", "larger", "longer"};
  static const std::set<std::string> down = {"less", "fewer", "lower", "smaller", "shorter"};
  int mask = 0;
  std::string word;
  auto flush = [&] {
    if (up.count(word)) mask |= 1;
    if (down.count(word)) mask |= 2;
    word.clear();
  };
  for (char c : text) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else {
      flush();
    }
  }
  flush();
  return mask;
}

}  // namespace

bool flips_direction(std::string_view original, std::string_view rewritten) {
  int before = polarity_mask(original);
  int after = polarity_mask(rewritten);
  // A polarity that appears only after the rewrite, while the other one was present before.
  bool gained_down = (after & 2) && !(before & 2) && (before & 1);
  bool gained_up = (after & 1) && !(before & 1) && (before & 2);
  bool lost_all = before != 0 && (after & before) == 0 && after != 0;
  return gained_down || gained_up || lost_all;
}

Hypothesis adjust_phrasing(Gateway& gateway, const std::string& model, const Hypothesis& hypothesis,
                           const GenerationConfig& gen, std::vector<std::string>& warnings,
                           const PromptLibrary& prompts) {
  if (trim(hypothesis.text).empty()) throw PreconditionError("adjust_phrasing needs non-empty text");
  std::string user = prompts.render("adjust_phrasing", {{"hypothesis", hypothesis.text}});
  std::string reply = gateway.complete_text(model, std::nullopt, user, gen);
  Hypothesis out = hypothesis;
  std::string text = strip_quotes(reply);
  if (!text.empty() && text.back() == '.') text.pop_back();
  text = trim(text);
  if (text.empty()) {
    warnings.push_back("phrasing rewrite for " + hypothesis.id + " was empty; keeping original");
    return out;
  }
  if (text.find('\n') != std::string::npos) {
    warnings.push_back("phrasing rewrite for " + hypothesis.id + " spans several lines; keeping original");
    return out;
  }
  if (flips_direction(hypothesis.text, text)) {
    warnings.push_back("phrasing rewrite for " + hypothesis.id + " changed the comparison direction; keeping original");
    return out;
  }
  out.text = std::move(text);
  return out;
}

// ---- pipeline -------------------------------------------------------------------

SaeDiffResult run_sae_diff(Gateway& gateway, const ActivationDump& dump_a, const ActivationDump& dump_b,
                           const std::function<std::optional<std::string>(Side, const std::string&)>& text_of,
                           const std::map<FeatureId, std::string>& initial_labels, const SaeDiffConfig& config,
                           const PromptLibrary& prompts) {
  SaeDiffResult result;
  dump_a.validate();
  dump_b.validate();
  auto pooled_a = pool_completion(dump_a);
  auto pooled_b = pool_completion(dump_b);
  result.stats = feature_frequency_diff(pooled_a, pooled_b);
  result.candidates = select_candidates(result.stats, config.n_candidates);
  for (auto& c : result.candidates) {
    if (auto it = initial_labels.find(c.feature_id); it != initial_labels.end()) c.label = it->second;
  }

  std::vector<std::vector<std::string>> relabel_warnings(result.candidates.size());
  gateway.parallel_for(result.candidates.size(), config.parallelism, [&](std::size_t i) {
    auto& c = result.candidates[i];
    auto examples =
        collect_examples(c.feature_id, pooled_a, pooled_b, text_of, config.n_positive, config.n_negative);
    try {
      if (examples.positives.empty()) {
        relabel_warnings[i].push_back("no positive examples for feature " + std::to_string(c.feature_id));
      } else {
        relabel_feature(gateway, config.relabel_model, c, examples.positives, examples.negatives, config.gen,
                        relabel_warnings[i], prompts);
      }
    } catch (const std::exception& e) {
      relabel_warnings[i].push_back("relabeling feature " + std::to_string(c.feature_id) + " failed: " + e.what());
    }
    if (!c.label || c.label->empty()) {
      c.label = "feature " + std::to_string(c.feature_id);
      relabel_warnings[i].push_back("feature " + std::to_string(c.feature_id) + " has no label; using its id");
    }
  });
  for (auto& w : relabel_warnings) result.warnings.insert(result.warnings.end(), w.begin(), w.end());

  result.summary = summarize_to_hypotheses(gateway, config.summarizer_model, result.candidates, config.n_hypotheses,
                                           config.gen, prompts);

  auto& hyps = result.summary.hypotheses;
  std::vector<std::vector<std::string>> phrasing_warnings(hyps.size());
  gateway.parallel_for(hyps.size(), config.parallelism, [&](std::size_t i) {
    try {
      hyps[i] = adjust_phrasing(gateway, config.phrasing_model, hyps[i], config.gen, phrasing_warnings[i], prompts);
    } catch (const std::exception& e) {
      phrasing_warnings[i].push_back("phrasing " + hyps[i].id + " failed: " + e.what());
    }
  });
  for (auto& w : phrasing_warnings) result.warnings.insert(result.warnings.end(), w.begin(), w.end());
  return result;
}

}  // namespace modeldiff
