#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "modeldiff/common.hpp"
#include "modeldiff/corpus.hpp"
#include "modeldiff/gateway.hpp"
#include "modeldiff/hdbscan.hpp"
#include "modeldiff/prompts.hpp"

namespace modeldiff {

/// One extracted difference. `neutral_text` has every model mention replaced
/// by kModelPlaceholder; `attributed_to` keeps the original attribution.
struct DifferenceRecord {
  std::string triplet_id;
  std::string text;
  Side attributed_to = Side::A;
  std::string neutral_text;

  friend bool operator==(const DifferenceRecord&, const DifferenceRecord&) = default;
};

void to_json(json& j, const DifferenceRecord& d);
void from_json(const json& j, DifferenceRecord& d);

/// Raised when a raw difference does not name exactly one model.
class AttributionError : public Error {
 public:
  using Error::Error;
};

DifferenceRecord normalize_attribution(const std::string& triplet_id, const std::string& raw_text);

/// Parses the extractor grammar {"differences": [string, ...]}. A single
/// surrounding code fence is tolerated.
std::vector<std::string> parse_difference_list(const std::string& text);

struct ExtractionOutput {
  std::vector<DifferenceRecord> records;
  /// Raw differences dropped because they named both or neither model.
  std::vector<std::string> rejected;
};

ExtractionOutput extract_differences(Gateway& gateway, const std::string& extractor_model, const Triplet& triplet,
                                     const GenerationConfig& gen, const PromptLibrary& prompts = default_prompts());

struct Cluster {
  int label = -1;
  std::vector<std::size_t> member_ids;  // row indices into the difference list
  Eigen::VectorXd centroid;
};

struct Clustering {
  std::vector<Cluster> clusters;   // non-noise, ordered by label
  std::vector<std::size_t> noise;  // row indices labelled noise
};

Clustering cluster_differences(const Eigen::MatrixXd& points, std::size_t min_cluster_size, std::size_t min_samples);

/// Checks a summarizer reply: non-empty, one sentence. Strips wrapping quotes
/// and a trailing period. Throws ParseError otherwise.
std::string parse_summary(const std::string& text);

std::string summarize_cluster(Gateway& gateway, const std::string& summarizer_model,
                              const std::vector<std::string>& member_texts, const GenerationConfig& gen,
                              const PromptLibrary& prompts = default_prompts());

/// Majority attribution of a cluster's members. Returns nullopt (discard) when
/// the majority fraction is below `threshold` or the split is a tie.
std::optional<Hypothesis> assign_direction(const Cluster& cluster, const std::vector<DifferenceRecord>& records,
                                           double threshold, std::string text = {});

struct LlmDiffConfig {
  std::string extractor_model;
  std::string summarizer_model;
  GenerationConfig gen{1024, 0.0, std::nullopt, 1};
  Eigen::Index pca_components = 128;
  HdbscanParams hdbscan{8, 8, false};
  double direction_threshold = 0.65;
  std::size_t parallelism = 8;
  /// Optional replacement for the built-in reduction (e.g. UMAP run
  /// elsewhere). Receives the raw embeddings and returns n rows.
  std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)> external_reduction;
};

struct ClusterSummary {
  int label = -1;
  std::size_t size = 0;
  std::string summary;
  double majority_fraction = 0.0;
  Side majority = Side::A;
  bool emitted = false;
};

struct LlmDiffResult {
  std::vector<DifferenceRecord> differences;
  Clustering clustering;
  std::vector<ClusterSummary> cluster_summaries;
  std::vector<Hypothesis> hypotheses;
  Eigen::Index reduced_dims = 0;
  std::vector<std::string> warnings;
};

/// Extraction -> normalization -> embedding -> reduction -> clustering ->
/// summarization -> direction assignment over the generation triplets.
LlmDiffResult run_llm_diff(Gateway& gateway, const std::vector<Triplet>& triplets, const LlmDiffConfig& config,
                           const PromptLibrary& prompts = default_prompts());

}  // namespace modeldiff
