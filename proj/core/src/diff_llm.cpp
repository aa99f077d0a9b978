#include "modeldiff/diff_llm.hpp"

#include <algorithm>
#include <cctype>
#include <regex>
#include <set>

#include "modeldiff/pca.hpp"
#include "modeldiff/structured.hpp"

namespace modeldiff {

namespace {

const std::regex& model_mention() {
  static const std::regex re(R"(\b[Mm]odel\s+([AB])\b)");
  return re;
}

// Summaries see at most this many member descriptions, spread evenly over the
// cluster, to bound prompt size on very large clusters.
constexpr std::size_t kMaxSummaryExamples = 60;

}  // namespace

void to_json(json& j, const DifferenceRecord& d) {
  j = json{{"triplet_id", d.triplet_id},
           {"text", d.text},
           {"attributed_to", std::string(1, side_char(d.attributed_to))},
           {"neutral_text", d.neutral_text}};
}

void from_json(const json& j, DifferenceRecord& d) {
  d.triplet_id = j.at("triplet_id").get<std::string>();
  d.text = j.at("text").get<std::string>();
  d.attributed_to = parse_side(j.at("attributed_to").get<std::string>());
  d.neutral_text = j.at("neutral_text").get<std::string>();
}

DifferenceRecord normalize_attribution(const std::string& triplet_id, const std::string& raw_text) {
  std::set<char> sides;
  for (auto it = std::sregex_iterator(raw_text.begin(), raw_text.end(), model_mention()); it != std::sregex_iterator();
       ++it) {
    sides.insert((*it)[1].str()[0]);
  }
  if (sides.empty()) throw AttributionError("difference names neither model: " + raw_text);
  if (sides.size() > 1) throw AttributionError("difference names both models: " + raw_text);
  DifferenceRecord rec;
  rec.triplet_id = triplet_id;
  rec.text = raw_text;
  rec.attributed_to = *sides.begin() == 'A' ? Side::A : Side::B;
  rec.neutral_text = std::regex_replace(raw_text, model_mention(), std::string(kModelPlaceholder));
  return rec;
}

std::vector<std::string> parse_difference_list(const std::string& text) {
  json doc;
  try {
    doc = json::parse(strip_code_fence(text));
  } catch (const json::parse_error&) {
    throw ParseError("difference list is not JSON", text);
  }
  if (!doc.is_object() || !doc.contains("differences") || !doc["differences"].is_array()) {
    throw ParseError("expected {\"differences\": [...]}", text);
  }
  std::vector<std::string> out;
  for (const auto& item : doc["differences"]) {
    if (!item.is_string()) throw ParseError("difference entries must be strings", text);
    std::string s = trim(item.get<std::string>());
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

ExtractionOutput extract_differences(Gateway& gateway, const std::string& extractor_model, const Triplet& triplet,
                                     const GenerationConfig& gen, const PromptLibrary& prompts) {
  if (triplet.response_a.empty() || triplet.response_b.empty()) {
    throw PreconditionError("triplet " + triplet.prompt_id + " has an empty response");
  }
  std::string user = prompts.render(
      "extract_user", {{"prompt", triplet.prompt}, {"response_a", triplet.response_a}, {"response_b", triplet.response_b}});
  auto raw = ask_parsed(gateway, extractor_model, prompts.get("extract_system"), user, gen, parse_difference_list);
  ExtractionOutput out;
  for (const auto& r : raw) {
    try {
      out.records.push_back(normalize_attribution(triplet.prompt_id, r));
    } catch (const AttributionError&) {
      out.rejected.push_back(r);
    }
  }
  return out;
}

Clustering cluster_differences(const Eigen::MatrixXd& points, std::size_t min_cluster_size, std::size_t min_samples) {
  auto flat = hdbscan(points, HdbscanParams{min_cluster_size, min_samples, false});
  Clustering out;
  out.clusters.resize(static_cast<std::size_t>(flat.n_clusters));
  for (int c = 0; c < flat.n_clusters; ++c) {
    out.clusters[c].label = c;
    out.clusters[c].centroid = Eigen::VectorXd::Zero(points.cols());
  }
  for (std::size_t i = 0; i < flat.labels.size(); ++i) {
    int label = flat.labels[i];
    if (label < 0) {
      out.noise.push_back(i);
      continue;
    }
    auto& c = out.clusters[static_cast<std::size_t>(label)];
    c.member_ids.push_back(i);
    c.centroid += points.row(static_cast<Eigen::Index>(i)).transpose();
  }
  for (auto& c : out.clusters) c.centroid /= static_cast<double>(c.member_ids.size());
  return out;
}

std::string parse_summary(const std::string& text) {
  std::string s = trim(text);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = trim(s.substr(1, s.size() - 2));
  if (!s.empty() && s.back() == '.') s.pop_back();
  s = trim(s);
  if (s.empty()) throw ParseError("empty summary", text);
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (c == '\n') throw ParseError("non-atomic summary", text);
    if ((c == '.' || c == '!' || c == '?') && i + 2 < s.size() &&
        std::isspace(static_cast<unsigned char>(s[i + 1])) && std::isupper(static_cast<unsigned char>(s[i + 2]))) {
      throw ParseError("non-atomic summary", text);
    }
  }
  return s;
}

std::string summarize_cluster(Gateway& gateway, const std::string& summarizer_model,
                              const std::vector<std::string>& member_texts, const GenerationConfig& gen,
                              const PromptLibrary& prompts) {
  if (member_texts.empty()) throw PreconditionError("cannot summarize an empty cluster");
  std::string listing;
  const std::size_t m = member_texts.size();
  const std::size_t shown = std::min(m, kMaxSummaryExamples);
  for (std::size_t k = 0; k < shown; ++k) {
    listing += "- " + member_texts[k * m / shown] + "\n";
  }
  if (!listing.empty()) listing.pop_back();
  std::string user = prompts.render("summarize_cluster",
                                    {{"placeholder", std::string(kModelPlaceholder)}, {"descriptions", listing}});
  return ask_parsed(gateway, summarizer_model, std::nullopt, user, gen, parse_summary);
}

std::optional<Hypothesis> assign_direction(const Cluster& cluster, const std::vector<DifferenceRecord>& records,
                                           double threshold, std::string text) {
  std::size_t a = 0;
  std::size_t b = 0;
  for (auto id : cluster.member_ids) {
    if (id >= records.size()) throw PreconditionError("cluster member without a recorded attribution");
    (records[id].attributed_to == Side::A ? a : b) += 1;
  }
  const std::size_t total = a + b;
  if (total == 0 || a == b) return std::nullopt;
  const Side majority = a > b ? Side::A : Side::B;
  const double fraction = static_cast<double>(std::max(a, b)) / static_cast<double>(total);
  if (fraction < threshold) return std::nullopt;
  Hypothesis h;
  h.text = std::move(text);
  h.direction = majority;
  h.method = Method::Llm;
  h.support = total;
  h.majority_fraction = fraction;
  return h;
}

LlmDiffResult run_llm_diff(Gateway& gateway, const std::vector<Triplet>& triplets, const LlmDiffConfig& config,
                           const PromptLibrary& prompts) {
  LlmDiffResult result;

  std::vector<ExtractionOutput> per_triplet(triplets.size());
  std::vector<std::string> errors(triplets.size());
  gateway.parallel_for(triplets.size(), config.parallelism, [&](std::size_t i) {
    try {
      per_triplet[i] = extract_differences(gateway, config.extractor_model, triplets[i], config.gen, prompts);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  std::size_t failed = 0;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    if (!errors[i].empty()) {
      ++failed;
      result.warnings.push_back("extraction failed for " + triplets[i].prompt_id + ": " + errors[i]);
      continue;
    }
    for (auto& r : per_triplet[i].records) result.differences.push_back(std::move(r));
    for (const auto& r : per_triplet[i].rejected) {
      result.warnings.push_back("difference without unique attribution in " + triplets[i].prompt_id + ": " + r);
    }
  }
  if (!triplets.empty() && failed == triplets.size()) throw Error("difference extraction failed for every triplet");

  const auto n = static_cast<Eigen::Index>(result.differences.size());
  if (n < static_cast<Eigen::Index>(config.hdbscan.min_cluster_size) || n < 2) {
    result.warnings.push_back("only " + std::to_string(n) + " differences; nothing to cluster");
    return result;
  }

  std::vector<std::string> neutral;
  neutral.reserve(result.differences.size());
  for (const auto& d : result.differences) neutral.push_back(d.neutral_text);
  Eigen::MatrixXd embeddings = gateway.embed(neutral);

  Eigen::MatrixXd reduced;
  if (config.external_reduction) {
    reduced = config.external_reduction(embeddings);
    if (reduced.rows() != n) throw Error("external reduction returned the wrong number of rows");
  } else {
    Eigen::Index k = std::min({config.pca_components, n, static_cast<Eigen::Index>(embeddings.cols())});
    auto pca = reduce_dimensions(embeddings, k);
    if (pca.zero_variance) result.warnings.push_back("all difference embeddings identical; PCA returned zeros");
    reduced = std::move(pca.projected);
  }
  result.reduced_dims = reduced.cols();

  result.clustering = cluster_differences(reduced, config.hdbscan.min_cluster_size,
                                          config.hdbscan.min_samples == 0 ? config.hdbscan.min_cluster_size
                                                                          : config.hdbscan.min_samples);

  const auto& clusters = result.clustering.clusters;
  result.cluster_summaries.resize(clusters.size());
  std::vector<std::optional<Hypothesis>> directed(clusters.size());
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    directed[c] = assign_direction(clusters[c], result.differences, config.direction_threshold);
    auto& s = result.cluster_summaries[c];
    s.label = clusters[c].label;
    s.size = clusters[c].member_ids.size();
    std::size_t a = 0;
    for (auto id : clusters[c].member_ids) a += result.differences[id].attributed_to == Side::A ? 1 : 0;
    s.majority = 2 * a >= s.size ? Side::A : Side::B;
    s.majority_fraction = static_cast<double>(std::max(a, s.size - a)) / static_cast<double>(s.size);
    s.emitted = directed[c].has_value();
  }

  // Discarded clusters never reach a hypothesis, so only emitted ones are summarized.
  std::vector<std::string> summary_errors(clusters.size());
  gateway.parallel_for(clusters.size(), config.parallelism, [&](std::size_t c) {
    if (!directed[c]) return;
    std::vector<std::string> texts;
    for (auto id : clusters[c].member_ids) texts.push_back(result.differences[id].neutral_text);
    try {
      result.cluster_summaries[c].summary = summarize_cluster(gateway, config.summarizer_model, texts, config.gen, prompts);
    } catch (const std::exception& e) {
      summary_errors[c] = e.what();
    }
  });

  std::size_t next_id = 1;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    if (!directed[c]) continue;
    if (!summary_errors[c].empty()) {
      result.cluster_summaries[c].emitted = false;
      result.warnings.push_back("cluster " + std::to_string(c) + " summary rejected: " + summary_errors[c]);
      continue;
    }
    Hypothesis h = *directed[c];
    h.text = result.cluster_summaries[c].summary;
    h.id = make_id("llm", next_id++);
    result.hypotheses.push_back(std::move(h));
  }
  return result;
}

}  // namespace modeldiff
