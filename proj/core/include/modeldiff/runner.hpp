#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "modeldiff/common.hpp"
#include "modeldiff/gateway.hpp"
#include "modeldiff/metrics.hpp"
#include "modeldiff/prompts.hpp"

namespace modeldiff {

struct ModelRoles {
  std::string a;
  std::string b;
  std::string extractor;
  std::string summarizer;
  std::string judge;
  std::vector<std::string> raters;
  std::string relabeler;
  std::string sae_summarizer;
  std::string phrasing;
  std::string kl_hypothesizer;

  /// Every distinct model id named by a role.
  std::vector<std::string> all() const;
};

struct ProviderConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string api_key_env = "OPENAI_API_KEY";
  bool supports_prefill = false;
  int max_top_logprobs = 20;
  std::string embedding_model = "text-embedding-3-small";
  double rate_per_second = 0.0;
  int timeout_seconds = 120;
};

struct RunConfig {
  ModelRoles models;
  ProviderConfig provider;

  std::filesystem::path prompts_file;
  std::optional<std::size_t> prompt_limit;
  std::size_t n_generation = 1000;
  std::size_t n_heldout = 500;
  std::uint64_t seed = 0;
  GenerationConfig collect_gen{1024, 0.0, std::nullopt, 1};
  GenerationConfig llm_gen{1024, 0.0, std::nullopt, 1};

  std::size_t min_cluster_size = 8;
  std::size_t min_samples = 0;  // 0: same as min_cluster_size
  double direction_threshold = 0.65;
  int pca_components = 128;
  std::optional<std::filesystem::path> reduced_embeddings;

  std::optional<std::filesystem::path> sae_dump_a;
  std::optional<std::filesystem::path> sae_dump_b;
  std::optional<std::filesystem::path> sae_labels;
  std::size_t n_candidates = 100;
  std::size_t n_hypotheses = 40;
  std::size_t n_positive = 5;
  std::size_t n_negative = 5;

  std::optional<std::filesystem::path> kl_dump_dir;
  Side kl_generator = Side::A;
  std::size_t top_n_forks = 5;
  int kl_samples = 20;
  double kl_temperature = 1.0;
  int kl_max_tokens = 32;
  bool kl_in_eval = false;

  std::size_t parallelism = 8;
  std::optional<std::filesystem::path> cache_dir;
  std::optional<std::filesystem::path> prompt_overrides;

  /// Deterministic JSON view recorded in the manifest; paths as given.
  json snapshot() const;
};

/// Reads the INI-style config. Relative paths resolve against the file's
/// directory. Unknown keys are rejected so typos do not pass silently.
RunConfig load_config(const std::filesystem::path& path);

enum class Stage { Collect, DiffLlm, DiffSae, KlFork, JudgeGen, JudgeHeldout, Rate, Report };

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view text);

struct StageRecord {
  bool completed = false;
  std::map<std::string, std::string> artifacts;  // run-dir relative path -> sha256
  std::map<std::string, std::size_t> counts;
  std::vector<std::string> warnings;
};

struct RunManifest {
  std::string run_id;
  json config;
  std::map<std::string, std::string> prompt_hashes;
  std::map<std::string, StageRecord> stages;

  json to_json() const;
  static RunManifest from_json(const json& j);
};

/// One report line; a projection of HypothesisEval plus the hypothesis it
/// belongs to.
struct ReportRow {
  std::string hypothesis_id;
  std::string text;
  Method method = Method::Llm;
  Side direction = Side::A;
  std::size_t n = 0;
  double f = 0.0;
  std::optional<double> acc;
  double vfd = 0.0;
  bool accepted = false;
  std::optional<double> interestingness;
  std::optional<double> abstraction;
};

void to_json(json& j, const ReportRow& r);
void from_json(const json& j, ReportRow& r);

ReportRow make_report_row(const Hypothesis& h, const HypothesisEval& e);

struct ReportFilter {
  std::optional<double> min_f;
  std::optional<double> min_acc;
  std::optional<double> min_interestingness;
  std::optional<double> abstraction_min;
  std::optional<double> abstraction_max;
};

/// Conjunction of the set criteria. A row lacking the measured value (acc
/// undefined, rating unset) fails any criterion on that value.
std::vector<ReportRow> filter_report(const std::vector<ReportRow>& rows, const ReportFilter& filter);

/// Gateway with every configured model routed to the live provider, or to a
/// mock replaying `mock_script` when given.
std::shared_ptr<Gateway> make_gateway(const RunConfig& config,
                                      const std::optional<std::filesystem::path>& mock_script);

class Runner {
 public:
  Runner(RunConfig config, std::filesystem::path run_dir, std::shared_ptr<Gateway> gateway);

  /// Runs one stage. Missing upstream artifacts raise an error naming the
  /// stage to run first.
  void run(Stage stage);

  /// Every stage in dependency order; diff-sae, kl-fork and rate only when
  /// configured.
  void run_all();

  const RunManifest& manifest() const { return manifest_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }
  const RunConfig& config() const { return config_; }

  /// Rows of the last report, read back from report.jsonl.
  std::vector<ReportRow> report_rows() const;

 private:
  void collect();
  void diff_llm();
  void diff_sae();
  void kl_fork();
  void judge_generation();
  void judge_heldout();
  void rate();
  void report();

  std::filesystem::path path(const std::string& name) const { return run_dir_ / name; }
  void require(const std::string& artifact, Stage producer) const;
  std::vector<Hypothesis> judged_hypotheses() const;
  void finish(Stage stage, StageRecord record, const std::vector<std::string>& artifacts);
  void save_manifest() const;

  RunConfig config_;
  std::filesystem::path run_dir_;
  std::shared_ptr<Gateway> gateway_;
  PromptLibrary prompts_;
  RunManifest manifest_;
};

}  // namespace modeldiff
