#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modeldiff/common.hpp"
#include "modeldiff/gateway.hpp"
#include "modeldiff/prompts.hpp"

namespace modeldiff {

using FeatureId = std::uint32_t;

struct TextSpan {
  std::string text_id;
  std::size_t completion_start = 0;  // first token of the response
  std::size_t total_tokens = 0;
};

struct ActivationEntry {
  std::size_t text = 0;  // index into ActivationDump::texts
  std::size_t token = 0;
  FeatureId feature = 0;
  double value = 0.0;
};

/// Sparse per-token SAE activations for a set of prompt+response texts, as
/// produced offline by the reader model.
struct ActivationDump {
  std::vector<TextSpan> texts;
  std::vector<ActivationEntry> entries;

  /// Throws Error naming the offending entry on any violated invariant.
  void validate() const;
};

/// Header line {"texts": [...]} then one {"text_id","token","feature","value"}
/// per line. Errors carry the 1-based line number.
ActivationDump load_activations(const std::filesystem::path& path);
void save_activations(const std::filesystem::path& path, const ActivationDump& dump);

/// Max over completion tokens per (text, feature); zeros are not stored.
struct PooledMatrix {
  std::vector<std::string> rows;
  std::vector<std::map<FeatureId, double>> values;

  std::optional<double> get(std::size_t row, FeatureId feature) const;
};

PooledMatrix pool_completion(const ActivationDump& dump);

struct FeatureStats {
  FeatureId feature_id = 0;
  std::size_t active_a = 0;
  std::size_t active_b = 0;
  double freq_a = 0.0;
  double freq_b = 0.0;
  double diff = 0.0;  // freq_a - freq_b
  std::optional<std::string> label;

  /// The model whose texts activate the feature more often.
  Side favored() const { return diff > 0.0 ? Side::A : Side::B; }
  friend bool operator==(const FeatureStats&, const FeatureStats&) = default;
};

void to_json(json& j, const FeatureStats& f);
void from_json(const json& j, FeatureStats& f);

/// One entry per feature active in either matrix, ordered by feature id.
/// Throws PreconditionError when either matrix has no rows.
std::vector<FeatureStats> feature_frequency_diff(const PooledMatrix& pooled_a, const PooledMatrix& pooled_b);

/// Top-k by |diff|; ties go to the lower feature id.
std::vector<FeatureStats> select_candidates(std::vector<FeatureStats> stats, std::size_t k);

struct FeatureExamples {
  std::vector<std::string> positives;
  std::vector<std::string> negatives;
};

/// Texts with the strongest pooled activation (positives) and texts where the
/// feature is inactive (negatives), drawn from both sides. `text_of` maps
/// (side, text_id) to the response text; ids it cannot resolve are skipped.
FeatureExamples collect_examples(FeatureId feature, const PooledMatrix& pooled_a, const PooledMatrix& pooled_b,
                                 const std::function<std::optional<std::string>(Side, const std::string&)>& text_of,
                                 std::size_t n_positive, std::size_t n_negative);

/// Asks the relabeler for a one-phrase label and stores it on `feature`. An
/// empty reply keeps the previous label and appends a warning.
std::string relabel_feature(Gateway& gateway, const std::string& model, FeatureStats& feature,
                            const std::vector<std::string>& positives, const std::vector<std::string>& negatives,
                            const GenerationConfig& gen, std::vector<std::string>& warnings,
                            const PromptLibrary& prompts = default_prompts());

struct SaeSummary {
  std::vector<Hypothesis> hypotheses;
  std::map<std::string, std::vector<FeatureId>> features_of;  // hypothesis id -> merged features
};

/// Parses {"hypotheses": [{"text": ..., "features": [ids]}]} against the
/// candidate set. Throws ParseError on unknown ids or mixed diff signs.
SaeSummary parse_sae_summary(const std::string& text, const std::vector<FeatureStats>& candidates, std::size_t n);

SaeSummary summarize_to_hypotheses(Gateway& gateway, const std::string& model,
                                   const std::vector<FeatureStats>& candidates, std::size_t n,
                                   const GenerationConfig& gen, const PromptLibrary& prompts = default_prompts());

/// True when `rewritten` swaps a comparative of one polarity (more/greater/
/// higher) for the other (less/fewer/lower) relative to `original`.
bool flips_direction(std::string_view original, std::string_view rewritten);

/// Rewrites the text into the shared hypothesis voice. Empty, multi-sentence,
/// or direction-flipping rewrites keep the original and append a warning.
Hypothesis adjust_phrasing(Gateway& gateway, const std::string& model, const Hypothesis& hypothesis,
                           const GenerationConfig& gen, std::vector<std::string>& warnings,
                           const PromptLibrary& prompts = default_prompts());

struct SaeDiffConfig {
  std::string relabel_model;
  std::string summarizer_model;
  std::string phrasing_model;
  std::size_t n_candidates = 100;
  std::size_t n_hypotheses = 40;
  std::size_t n_positive = 5;
  std::size_t n_negative = 5;
  GenerationConfig gen{1024, 0.0, std::nullopt, 1};
  std::size_t parallelism = 8;
};

struct SaeDiffResult {
  std::vector<FeatureStats> stats;
  std::vector<FeatureStats> candidates;
  SaeSummary summary;
  std::vector<std::string> warnings;
};

SaeDiffResult run_sae_diff(Gateway& gateway, const ActivationDump& dump_a, const ActivationDump& dump_b,
                           const std::function<std::optional<std::string>(Side, const std::string&)>& text_of,
                           const std::map<FeatureId, std::string>& initial_labels, const SaeDiffConfig& config,
                           const PromptLibrary& prompts = default_prompts());

}  // namespace modeldiff
