#include "modeldiff/runner.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "modeldiff/corpus.hpp"
#include "modeldiff/diff_llm.hpp"
#include "modeldiff/diff_sae.hpp"
#include "modeldiff/judge.hpp"
#include "modeldiff/kl_fork.hpp"

namespace modeldiff {

namespace fs = std::filesystem;

// ---- config -------------------------------------------------------------------

std::vector<std::string> ModelRoles::all() const {
  std::vector<std::string> ids = {a, b, extractor, summarizer, judge, relabeler, sae_summarizer, phrasing, kl_hypothesizer};
  ids.insert(ids.end(), raters.begin(), raters.end());
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (auto& id : ids) {
    if (!id.empty() && seen.insert(id).second) out.push_back(id);
  }
  return out;
}

namespace {

json opt_path(const std::optional<fs::path>& p) { return p ? json(p->generic_string()) : json(nullptr); }

json gen_json(const GenerationConfig& g) {
  return json{{"max_new_tokens", g.max_new_tokens}, {"temperature", g.temperature}};
}

}  // namespace

json RunConfig::snapshot() const {
  return json{
      {"models",
       {{"a", models.a},
        {"b", models.b},
        {"extractor", models.extractor},
        {"summarizer", models.summarizer},
        {"judge", models.judge},
        {"raters", models.raters},
        {"relabeler", models.relabeler},
        {"sae_summarizer", models.sae_summarizer},
        {"phrasing", models.phrasing},
        {"kl_hypothesizer", models.kl_hypothesizer}}},
      {"provider",
       {{"base_url", provider.base_url},
        {"supports_prefill", provider.supports_prefill},
        {"max_top_logprobs", provider.max_top_logprobs},
        {"embedding_model", provider.embedding_model}}},
      {"corpus",
       {{"prompts", prompts_file.generic_string()},
        {"limit", prompt_limit ? json(*prompt_limit) : json(nullptr)},
        {"n_generation", n_generation},
        {"n_heldout", n_heldout},
        {"generation", gen_json(collect_gen)}}},
      {"seed", seed},
      {"llm_generation", gen_json(llm_gen)},
      {"diff_llm",
       {{"min_cluster_size", min_cluster_size},
        {"min_samples", min_samples == 0 ? min_cluster_size : min_samples},
        {"direction_threshold", direction_threshold},
        {"pca_components", pca_components},
        {"embeddings_normalized", false},
        {"reduced_embeddings", opt_path(reduced_embeddings)}}},
      {"diff_sae",
       {{"dump_a", opt_path(sae_dump_a)},
        {"dump_b", opt_path(sae_dump_b)},
        {"labels", opt_path(sae_labels)},
        {"n_candidates", n_candidates},
        {"n_hypotheses", n_hypotheses},
        {"n_positive", n_positive},
        {"n_negative", n_negative}}},
      {"kl_fork",
       {{"dump_dir", opt_path(kl_dump_dir)},
        {"generator", std::string(1, side_char(kl_generator))},
        {"kl_direction", "KL(generator || other)"},
        {"missing_token_floor", kMissingTokenFloor},
        {"prefill", provider.supports_prefill ? "assistant prefill" : "continuation instruction in user turn"},
        {"top_n", top_n_forks},
        {"samples", kl_samples},
        {"temperature", kl_temperature},
        {"max_tokens", kl_max_tokens},
        {"include_in_eval", kl_in_eval}}},
      {"judge", {{"batch_size", kMaxJudgeBatch}, {"temperature", llm_gen.temperature}}},
  };
}

namespace {

using boost::property_tree::ptree;

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"models",
       {"a", "b", "extractor", "summarizer", "judge", "raters", "relabeler", "sae_summarizer", "phrasing",
        "kl_hypothesizer"}},
      {"provider",
       {"base_url", "api_key_env", "supports_prefill", "max_top_logprobs", "embedding_model", "rate_per_second",
        "timeout_seconds"}},
      {"corpus", {"prompts", "limit", "n_generation", "n_heldout", "max_new_tokens", "temperature"}},
      {"generation", {"max_new_tokens", "temperature"}},
      {"diff_llm", {"min_cluster_size", "min_samples", "direction_threshold", "pca_components", "reduced_embeddings"}},
      {"diff_sae", {"dump_a", "dump_b", "labels", "n_candidates", "n_hypotheses", "n_positive", "n_negative"}},
      {"kl_fork", {"dump_dir", "generator", "top_n", "samples", "temperature", "max_tokens", "include_in_eval"}},
      {"run", {"seed", "parallelism", "cache_dir", "prompt_overrides"}},
  };
  return keys;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

RunConfig load_config(const fs::path& path) {
  ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
  for (const auto& [section, body] : tree) {
    auto it = known_keys().find(section);
    if (it == known_keys().end()) throw Error("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) throw Error("config: unknown key " + section + "." + key);
    }
  }
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  auto str = [&](const char* key) { return tree.get_optional<std::string>(key); };
  auto opt_file = [&](const char* key) -> std::optional<fs::path> {
    if (auto v = str(key)) return resolve(trim(*v));
    return std::nullopt;
  };
  auto get_bool = [&](const char* key, bool fallback) {
    auto v = str(key);
    if (!v) return fallback;
    std::string s = trim(*v);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw Error(std::string("config: ") + key + " must be true or false");
  };

  // get<T>(key, fallback) falls back silently on unparseable values.
  auto num = [&](const char* key, auto fallback) {
    if (!tree.get_child_optional(key)) return fallback;
    return tree.get<decltype(fallback)>(key);
  };

  RunConfig c;
  try {
    auto& m = c.models;
    m.a = tree.get<std::string>("models.a", "");
    m.b = tree.get<std::string>("models.b", "");
    m.extractor = tree.get<std::string>("models.extractor", "");
    m.summarizer = tree.get<std::string>("models.summarizer", m.extractor);
    m.judge = tree.get<std::string>("models.judge", "");
    m.raters = split_list(tree.get<std::string>("models.raters", ""));
    m.relabeler = tree.get<std::string>("models.relabeler", m.summarizer);
    m.sae_summarizer = tree.get<std::string>("models.sae_summarizer", m.summarizer);
    m.phrasing = tree.get<std::string>("models.phrasing", m.summarizer);
    m.kl_hypothesizer = tree.get<std::string>("models.kl_hypothesizer", m.summarizer);

    auto& p = c.provider;
    p.base_url = tree.get<std::string>("provider.base_url", p.base_url);
    p.api_key_env = tree.get<std::string>("provider.api_key_env", p.api_key_env);
    p.supports_prefill = get_bool("provider.supports_prefill", p.supports_prefill);
    p.max_top_logprobs = num("provider.max_top_logprobs", p.max_top_logprobs);
    p.embedding_model = tree.get<std::string>("provider.embedding_model", p.embedding_model);
    p.rate_per_second = num("provider.rate_per_second", p.rate_per_second);
    p.timeout_seconds = num("provider.timeout_seconds", p.timeout_seconds);

    if (auto v = opt_file("corpus.prompts")) c.prompts_file = *v;
    if (tree.get_child_optional("corpus.limit")) c.prompt_limit = tree.get<std::size_t>("corpus.limit");
    c.n_generation = num("corpus.n_generation", c.n_generation);
    c.n_heldout = num("corpus.n_heldout", c.n_heldout);
    c.collect_gen.max_new_tokens = num("corpus.max_new_tokens", c.collect_gen.max_new_tokens);
    c.collect_gen.temperature = num("corpus.temperature", c.collect_gen.temperature);
    c.llm_gen.max_new_tokens = num("generation.max_new_tokens", c.llm_gen.max_new_tokens);
    c.llm_gen.temperature = num("generation.temperature", c.llm_gen.temperature);

    c.min_cluster_size = num("diff_llm.min_cluster_size", c.min_cluster_size);
    c.min_samples = num("diff_llm.min_samples", c.min_samples);
    c.direction_threshold = num("diff_llm.direction_threshold", c.direction_threshold);
    c.pca_components = num("diff_llm.pca_components", c.pca_components);
    c.reduced_embeddings = opt_file("diff_llm.reduced_embeddings");

    c.sae_dump_a = opt_file("diff_sae.dump_a");
    c.sae_dump_b = opt_file("diff_sae.dump_b");
    c.sae_labels = opt_file("diff_sae.labels");
    c.n_candidates = num("diff_sae.n_candidates", c.n_candidates);
    c.n_hypotheses = num("diff_sae.n_hypotheses", c.n_hypotheses);
    c.n_positive = num("diff_sae.n_positive", c.n_positive);
    c.n_negative = num("diff_sae.n_negative", c.n_negative);

    c.kl_dump_dir = opt_file("kl_fork.dump_dir");
    c.kl_generator = parse_side(tree.get<std::string>("kl_fork.generator", "A"));
    c.top_n_forks = num("kl_fork.top_n", c.top_n_forks);
    c.kl_samples = num("kl_fork.samples", c.kl_samples);
    c.kl_temperature = num("kl_fork.temperature", c.kl_temperature);
    c.kl_max_tokens = num("kl_fork.max_tokens", c.kl_max_tokens);
    c.kl_in_eval = get_bool("kl_fork.include_in_eval", c.kl_in_eval);

    c.seed = num("run.seed", c.seed);
    c.parallelism = num("run.parallelism", c.parallelism);
    c.cache_dir = opt_file("run.cache_dir");
    c.prompt_overrides = opt_file("run.prompt_overrides");
  } catch (const boost::property_tree::ptree_error& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
  return c;
}

// ---- stages and manifest --------------------------------------------------------

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::Collect: return "collect";
    case Stage::DiffLlm: return "diff-llm";
    case Stage::DiffSae: return "diff-sae";
    case Stage::KlFork: return "kl-fork";
    case Stage::JudgeGen: return "judge-gen";
    case Stage::JudgeHeldout: return "judge-heldout";
    case Stage::Rate: return "rate";
    case Stage::Report: return "report";
  }
  return "?";
}

Stage parse_stage(std::string_view text) {
  for (Stage s : {Stage::Collect, Stage::DiffLlm, Stage::DiffSae, Stage::KlFork, Stage::JudgeGen, Stage::JudgeHeldout,
                  Stage::Rate, Stage::Report}) {
    if (stage_name(s) == text) return s;
  }
  throw Error("unknown stage '" + std::string(text) + "'");
}

json RunManifest::to_json() const {
  json stages_j = json::object();
  for (const auto& [name, r] : stages) {
    stages_j[name] = json{{"completed", r.completed}, {"artifacts", r.artifacts}, {"counts", r.counts}, {"warnings", r.warnings}};
  }
  return json{{"run_id", run_id}, {"config", config}, {"prompt_hashes", prompt_hashes}, {"stages", stages_j}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.config = j.at("config");
  m.prompt_hashes = j.at("prompt_hashes").get<std::map<std::string, std::string>>();
  for (const auto& [name, r] : j.at("stages").items()) {
    StageRecord rec;
    rec.completed = r.at("completed").get<bool>();
    rec.artifacts = r.at("artifacts").get<std::map<std::string, std::string>>();
    rec.counts = r.at("counts").get<std::map<std::string, std::size_t>>();
    rec.warnings = r.at("warnings").get<std::vector<std::string>>();
    m.stages[name] = std::move(rec);
  }
  return m;
}

// ---- report rows ----------------------------------------------------------------

namespace {

json opt(const std::optional<double>& x) { return x ? json(*x) : json(nullptr); }
std::optional<double> opt_double(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

void to_json(json& j, const ReportRow& r) {
  j = json{{"hypothesis_id", r.hypothesis_id},
           {"text", r.text},
           {"method", method_name(r.method)},
           {"direction", std::string(1, side_char(r.direction))},
           {"n", r.n},
           {"f", r.f},
           {"acc", opt(r.acc)},
           {"vfd", r.vfd},
           {"accepted", r.accepted},
           {"interestingness", opt(r.interestingness)},
           {"abstraction", opt(r.abstraction)}};
}

void from_json(const json& j, ReportRow& r) {
  r.hypothesis_id = j.at("hypothesis_id").get<std::string>();
  r.text = j.at("text").get<std::string>();
  r.method = parse_method(j.at("method").get<std::string>());
  r.direction = parse_side(j.at("direction").get<std::string>());
  r.n = j.at("n").get<std::size_t>();
  r.f = j.at("f").get<double>();
  r.acc = opt_double(j, "acc");
  r.vfd = j.at("vfd").get<double>();
  r.accepted = j.at("accepted").get<bool>();
  r.interestingness = opt_double(j, "interestingness");
  r.abstraction = opt_double(j, "abstraction");
}

ReportRow make_report_row(const Hypothesis& h, const HypothesisEval& e) {
  if (h.id != e.hypothesis_id) throw PreconditionError("report row: hypothesis and eval ids differ");
  ReportRow r;
  r.hypothesis_id = h.id;
  r.text = h.text;
  r.method = h.method;
  r.direction = h.direction;
  r.n = e.n;
  r.f = e.f;
  r.acc = e.acc;
  r.vfd = e.vfd;
  r.accepted = e.accepted;
  r.interestingness = e.interestingness;
  r.abstraction = e.abstraction;
  return r;
}

std::vector<ReportRow> filter_report(const std::vector<ReportRow>& rows, const ReportFilter& filter) {
  auto at_least = [](const std::optional<double>& value, const std::optional<double>& bound) {
    return !bound || (value && *value >= *bound);
  };
  auto at_most = [](const std::optional<double>& value, const std::optional<double>& bound) {
    return !bound || (value && *value <= *bound);
  };
  std::vector<ReportRow> out;
  for (const auto& r : rows) {
    if (filter.min_f && r.f < *filter.min_f) continue;
    if (!at_least(r.acc, filter.min_acc)) continue;
    if (!at_least(r.interestingness, filter.min_interestingness)) continue;
    if (!at_least(r.abstraction, filter.abstraction_min)) continue;
    if (!at_most(r.abstraction, filter.abstraction_max)) continue;
    out.push_back(r);
  }
  return out;
}

// ---- gateway ---------------------------------------------------------------------

std::shared_ptr<Gateway> make_gateway(const RunConfig& config, const std::optional<fs::path>& mock_script) {
  GatewayOptions options;
  options.parallelism = config.parallelism;
  options.cache_dir = config.cache_dir;
  auto gateway = std::make_shared<Gateway>(options);
  std::shared_ptr<Backend> backend;
  std::shared_ptr<Backend> embedder;
  if (mock_script) {
    backend = std::make_shared<MockBackend>(MockScript::load(*mock_script));
    embedder = backend;
  } else {
    OpenAiOptions o;
    o.base_url = config.provider.base_url;
    if (const char* key = std::getenv(config.provider.api_key_env.c_str())) o.api_key = key;
    o.supports_prefill = config.provider.supports_prefill;
    o.max_top_logprobs = config.provider.max_top_logprobs;
    o.timeout = std::chrono::seconds(config.provider.timeout_seconds);
    o.embedding_model = config.provider.embedding_model;
    backend = std::make_shared<OpenAiBackend>(o);
    embedder = backend;
  }
  for (const auto& id : config.models.all()) {
    gateway->register_model(id, backend, id, mock_script ? 0.0 : config.provider.rate_per_second);
  }
  gateway->set_embedder(embedder);
  return gateway;
}

// ---- runner ------------------------------------------------------------------------

namespace {

const char* kManifest = "manifest.json";

std::string file_hash(const fs::path& p) { return sha256_hex(read_text(p)); }

std::vector<Hypothesis> read_hypotheses(const fs::path& p) { return read_jsonl_as<Hypothesis>(p); }

double mean_tokens(const std::vector<Triplet>& ts, Side side) {
  if (ts.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : ts) sum += static_cast<double>(count_tokens(t.response(side)));
  return sum / static_cast<double>(ts.size());
}

json length_report(const std::vector<Triplet>& ts, int max_new_tokens) {
  const double a = mean_tokens(ts, Side::A);
  const double b = mean_tokens(ts, Side::B);
  std::size_t at_cap = 0;
  for (const auto& t : ts) {
    for (Side s : {Side::A, Side::B}) {
      if (count_tokens(t.response(s)) >= static_cast<std::size_t>(max_new_tokens)) ++at_cap;
    }
  }
  return json{{"n", ts.size()},
              {"mean_tokens_a", a},
              {"mean_tokens_b", b},
              {"ratio_b_over_a", a > 0.0 ? json(b / a) : json(nullptr)},
              {"responses_at_token_cap", at_cap}};
}

ActivationDump restrict_texts(const ActivationDump& dump, const std::set<std::string>& ids) {
  ActivationDump out;
  std::vector<std::ptrdiff_t> remap(dump.texts.size(), -1);
  for (std::size_t i = 0; i < dump.texts.size(); ++i) {
    if (!ids.count(dump.texts[i].text_id)) continue;
    remap[i] = static_cast<std::ptrdiff_t>(out.texts.size());
    out.texts.push_back(dump.texts[i]);
  }
  for (const auto& e : dump.entries) {
    if (remap[e.text] < 0) continue;
    auto copy = e;
    copy.text = static_cast<std::size_t>(remap[e.text]);
    out.entries.push_back(copy);
  }
  return out;
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

}  // namespace

Runner::Runner(RunConfig config, fs::path run_dir, std::shared_ptr<Gateway> gateway)
    : config_(std::move(config)),
      run_dir_(std::move(run_dir)),
      gateway_(std::move(gateway)),
      prompts_(config_.prompt_overrides ? PromptLibrary(*config_.prompt_overrides) : PromptLibrary()) {
  if (!gateway_) throw PreconditionError("runner needs a gateway");
  fs::create_directories(run_dir_);
  const json snapshot = config_.snapshot();
  const auto hashes = prompts_.hashes();
  const std::string run_id = sha256_hex(json{{"config", snapshot}, {"prompts", hashes}}.dump()).substr(0, 16);
  if (fs::exists(path(kManifest))) {
    auto existing = RunManifest::from_json(json::parse(read_text(path(kManifest))));
    // Stage records from a different configuration would describe stale inputs.
    if (existing.run_id == run_id) manifest_ = std::move(existing);
  }
  manifest_.run_id = run_id;
  manifest_.config = snapshot;
  manifest_.prompt_hashes = hashes;
}

void Runner::save_manifest() const { write_text(path(kManifest), manifest_.to_json().dump(2) + "\n"); }

void Runner::require(const std::string& artifact, Stage producer) const {
  if (!fs::exists(path(artifact))) {
    throw Error("missing " + artifact + ": run " + std::string(stage_name(producer)) + " first");
  }
}

void Runner::finish(Stage stage, StageRecord record, const std::vector<std::string>& artifacts) {
  record.completed = true;
  for (const auto& a : artifacts) record.artifacts[a] = file_hash(path(a));
  manifest_.stages[std::string(stage_name(stage))] = std::move(record);
  save_manifest();
}

void Runner::run(Stage stage) {
  switch (stage) {
    case Stage::Collect: collect(); break;
    case Stage::DiffLlm: diff_llm(); break;
    case Stage::DiffSae: diff_sae(); break;
    case Stage::KlFork: kl_fork(); break;
    case Stage::JudgeGen: judge_generation(); break;
    case Stage::JudgeHeldout: judge_heldout(); break;
    case Stage::Rate: rate(); break;
    case Stage::Report: report(); break;
  }
}

void Runner::run_all() {
  run(Stage::Collect);
  run(Stage::DiffLlm);
  if (config_.sae_dump_a && config_.sae_dump_b) run(Stage::DiffSae);
  if (config_.kl_dump_dir) run(Stage::KlFork);
  run(Stage::JudgeGen);
  run(Stage::JudgeHeldout);
  if (!config_.models.raters.empty()) run(Stage::Rate);
  run(Stage::Report);
}

void Runner::collect() {
  if (config_.prompts_file.empty()) throw Error("config has no [corpus] prompts file");
  auto prompts = load_prompts(config_.prompts_file, config_.prompt_limit);
  auto result =
      collect_pairs(*gateway_, prompts, config_.models.a, config_.models.b, config_.collect_gen, config_.parallelism);
  auto split = split_corpus(result.triplets, config_.n_generation, config_.n_heldout, config_.seed);

  StageRecord rec;
  std::vector<json> failures;
  for (const auto& f : result.failures) {
    failures.push_back({{"prompt_id", f.prompt_id}, {"error", f.error}});
    rec.warnings.push_back("collection failed for " + f.prompt_id + ": " + f.error);
  }
  write_jsonl_from(path("triplets.jsonl"), result.triplets);
  write_jsonl(path("collect_failures.jsonl"), failures);
  write_jsonl_from(path("generation.jsonl"), split.generation);
  write_jsonl_from(path("heldout.jsonl"), split.heldout);
  json lengths{{"all", length_report(result.triplets, config_.collect_gen.max_new_tokens)},
               {"generation", length_report(split.generation, config_.collect_gen.max_new_tokens)},
               {"heldout", length_report(split.heldout, config_.collect_gen.max_new_tokens)},
               {"token_unit", "whitespace-delimited tokens"}};
  write_text(path("response_lengths.json"), lengths.dump(2) + "\n");

  rec.counts = {{"prompts", prompts.size()},
                {"triplets", result.triplets.size()},
                {"skipped", result.failures.size()},
                {"generation", split.generation.size()},
                {"heldout", split.heldout.size()}};
  finish(Stage::Collect, std::move(rec),
         {"triplets.jsonl", "collect_failures.jsonl", "generation.jsonl", "heldout.jsonl", "response_lengths.json"});
}

void Runner::diff_llm() {
  require("generation.jsonl", Stage::Collect);
  auto generation = read_jsonl_as<Triplet>(path("generation.jsonl"));

  LlmDiffConfig cfg;
  cfg.extractor_model = config_.models.extractor;
  cfg.summarizer_model = config_.models.summarizer;
  cfg.gen = config_.llm_gen;
  cfg.pca_components = config_.pca_components;
  cfg.hdbscan = HdbscanParams{config_.min_cluster_size,
                              config_.min_samples == 0 ? config_.min_cluster_size : config_.min_samples, false};
  cfg.direction_threshold = config_.direction_threshold;
  cfg.parallelism = config_.parallelism;
  if (config_.reduced_embeddings) {
    auto file = *config_.reduced_embeddings;
    cfg.external_reduction = [file](const Eigen::MatrixXd& embeddings) {
      auto rows = read_jsonl(file);
      if (static_cast<Eigen::Index>(rows.size()) != embeddings.rows()) {
        throw Error("reduced embeddings file has " + std::to_string(rows.size()) + " rows, expected " +
                    std::to_string(embeddings.rows()));
      }
      const auto d = rows.empty() ? 0 : rows.front().size();
      Eigen::MatrixXd out(embeddings.rows(), static_cast<Eigen::Index>(d));
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != d) throw Error("reduced embeddings: ragged row " + std::to_string(i + 1));
        for (std::size_t k = 0; k < d; ++k) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k].get<double>();
      }
      return out;
    };
  }
  auto result = run_llm_diff(*gateway_, generation, cfg, prompts_);

  std::vector<json> clusters;
  for (std::size_t c = 0; c < result.clustering.clusters.size(); ++c) {
    const auto& cl = result.clustering.clusters[c];
    const auto& s = result.cluster_summaries[c];
    clusters.push_back({{"label", s.label},
                        {"size", s.size},
                        {"majority", std::string(1, side_char(s.majority))},
                        {"majority_fraction", s.majority_fraction},
                        {"emitted", s.emitted},
                        {"summary", s.summary},
                        {"members", cl.member_ids}});
  }
  write_jsonl_from(path("differences.jsonl"), result.differences);
  write_jsonl(path("clusters.jsonl"), clusters);
  write_jsonl_from(path("hypotheses_llm.jsonl"), result.hypotheses);

  StageRecord rec;
  rec.warnings = std::move(result.warnings);
  rec.counts = {{"differences", result.differences.size()},
                {"clusters", result.clustering.clusters.size()},
                {"noise", result.clustering.noise.size()},
                {"reduced_dims", static_cast<std::size_t>(result.reduced_dims)},
                {"hypotheses", result.hypotheses.size()}};
  finish(Stage::DiffLlm, std::move(rec), {"differences.jsonl", "clusters.jsonl", "hypotheses_llm.jsonl"});
}

void Runner::diff_sae() {
  require("generation.jsonl", Stage::Collect);
  if (!config_.sae_dump_a || !config_.sae_dump_b) {
    throw Error("diff-sae needs [diff_sae] dump_a and dump_b in the config");
  }
  auto generation = read_jsonl_as<Triplet>(path("generation.jsonl"));
  std::set<std::string> ids;
  std::map<std::string, const Triplet*> by_id;
  for (const auto& t : generation) {
    ids.insert(t.prompt_id);
    by_id[t.prompt_id] = &t;
  }
  auto dump_a = restrict_texts(load_activations(*config_.sae_dump_a), ids);
  auto dump_b = restrict_texts(load_activations(*config_.sae_dump_b), ids);
  std::map<FeatureId, std::string> labels;
  if (config_.sae_labels) {
    for (const auto& row : read_jsonl(*config_.sae_labels)) {
      labels[row.at("feature").get<FeatureId>()] = row.at("label").get<std::string>();
    }
  }
  auto text_of = [&](Side side, const std::string& id) -> std::optional<std::string> {
    auto it = by_id.find(id);
    if (it == by_id.end()) return std::nullopt;
    return it->second->response(side);
  };

  SaeDiffConfig cfg;
  cfg.relabel_model = config_.models.relabeler;
  cfg.summarizer_model = config_.models.sae_summarizer;
  cfg.phrasing_model = config_.models.phrasing;
  cfg.n_candidates = config_.n_candidates;
  cfg.n_hypotheses = config_.n_hypotheses;
  cfg.n_positive = config_.n_positive;
  cfg.n_negative = config_.n_negative;
  cfg.gen = config_.llm_gen;
  cfg.parallelism = config_.parallelism;
  auto result = run_sae_diff(*gateway_, dump_a, dump_b, text_of, labels, cfg, prompts_);

  write_jsonl_from(path("candidates.jsonl"), result.candidates);
  write_jsonl_from(path("hypotheses_sae.jsonl"), result.summary.hypotheses);
  json mapping = json::object();
  for (const auto& [id, features] : result.summary.features_of) mapping[id] = features;
  write_text(path("sae_mapping.json"), mapping.dump(2) + "\n");

  StageRecord rec;
  rec.warnings = std::move(result.warnings);
  rec.counts = {{"texts_a", dump_a.texts.size()},
                {"texts_b", dump_b.texts.size()},
                {"features", result.stats.size()},
                {"candidates", result.candidates.size()},
                {"hypotheses", result.summary.hypotheses.size()}};
  finish(Stage::DiffSae, std::move(rec), {"candidates.jsonl", "hypotheses_sae.jsonl", "sae_mapping.json"});
}

void Runner::kl_fork() {
  require("generation.jsonl", Stage::Collect);
  if (!config_.kl_dump_dir) throw Error("kl-fork needs [kl_fork] dump_dir in the config");
  auto generation = read_jsonl_as<Triplet>(path("generation.jsonl"));
  StageRecord rec;

  std::vector<ForkPoint> forks;
  std::size_t scanned = 0;
  for (const auto& t : generation) {
    auto file = *config_.kl_dump_dir / (t.prompt_id + ".jsonl");
    if (!fs::exists(file)) continue;
    ++scanned;
    auto [gen_dump, other_dump] = load_fork_dump(file);
    std::string joined;
    for (const auto& tok : gen_dump.tokens) joined += tok;
    if (trim(joined) != trim(t.response(config_.kl_generator))) {
      rec.warnings.push_back("logprob dump tokens for " + t.prompt_id + " do not reproduce the response text");
    }
    auto found = find_fork_tokens(t.prompt_id, t.prompt, config_.kl_generator, gen_dump, other_dump, config_.top_n_forks);
    forks.insert(forks.end(), found.begin(), found.end());
  }
  std::stable_sort(forks.begin(), forks.end(),
                   [](const ForkPoint& a, const ForkPoint& b) { return a.score.score > b.score.score; });
  if (forks.size() > config_.top_n_forks) forks.resize(config_.top_n_forks);

  std::vector<ForkSamples> samples(forks.size());
  std::vector<std::vector<Hypothesis>> found(forks.size());
  std::vector<std::vector<std::string>> warnings(forks.size());
  gateway_->parallel_for(forks.size(), config_.parallelism, [&](std::size_t i) {
    try {
      samples[i] = sample_fork_completions(*gateway_, config_.models.a, config_.models.b, forks[i], config_.kl_samples,
                                           config_.kl_temperature, config_.kl_max_tokens, prompts_);
      found[i] = hypothesize_from_forks(*gateway_, config_.models.kl_hypothesizer, config_.models.phrasing, forks[i],
                                        samples[i], config_.llm_gen, warnings[i], prompts_);
    } catch (const std::exception& e) {
      warnings[i].push_back("fork " + forks[i].triplet_id + "@" + std::to_string(forks[i].score.position) +
                            " failed: " + e.what());
    }
  });

  std::vector<json> fork_rows;
  std::vector<Hypothesis> hypotheses;
  for (std::size_t i = 0; i < forks.size(); ++i) {
    json row = forks[i];
    row["completions"] = samples[i];
    fork_rows.push_back(std::move(row));
    rec.warnings.insert(rec.warnings.end(), warnings[i].begin(), warnings[i].end());
    for (auto& h : found[i]) {
      auto same = std::find_if(hypotheses.begin(), hypotheses.end(), [&](const Hypothesis& x) {
        return x.text == h.text && x.direction == h.direction;
      });
      if (same != hypotheses.end()) {
        ++same->support;
        continue;
      }
      h.id = make_id("kl", hypotheses.size() + 1);
      hypotheses.push_back(std::move(h));
    }
  }
  write_jsonl(path("forks.jsonl"), fork_rows);
  write_jsonl_from(path("hypotheses_kl.jsonl"), hypotheses);
  rec.counts = {{"dumps", scanned}, {"forks", forks.size()}, {"hypotheses", hypotheses.size()}};
  finish(Stage::KlFork, std::move(rec), {"forks.jsonl", "hypotheses_kl.jsonl"});
}

std::vector<Hypothesis> Runner::judged_hypotheses() const {
  std::vector<Hypothesis> out;
  for (const char* name : {"hypotheses_llm.jsonl", "hypotheses_sae.jsonl"}) {
    if (fs::exists(path(name))) {
      auto hs = read_hypotheses(path(name));
      out.insert(out.end(), hs.begin(), hs.end());
    }
  }
  if (config_.kl_in_eval && fs::exists(path("hypotheses_kl.jsonl"))) {
    auto hs = read_hypotheses(path("hypotheses_kl.jsonl"));
    out.insert(out.end(), hs.begin(), hs.end());
  }
  return out;
}

void Runner::judge_generation() {
  require("generation.jsonl", Stage::Collect);
  auto hypotheses = judged_hypotheses();
  if (hypotheses.empty()) {
    if (!fs::exists(path("hypotheses_llm.jsonl"))) require("hypotheses_llm.jsonl", Stage::DiffLlm);
    throw Error("no hypotheses to judge; the diffing stages produced none");
  }
  auto generation = read_jsonl_as<Triplet>(path("generation.jsonl"));
  auto verdicts = judge_all(*gateway_, config_.models.judge, hypotheses, generation, config_.seed * 2, config_.llm_gen,
                            config_.parallelism, prompts_);
  StageRecord rec;
  std::vector<json> rows;
  std::size_t accepted = 0;
  for (const auto& h : hypotheses) {
    HypothesisEval e;
    try {
      e = evaluate(h.id, verdicts);
    } catch (const PreconditionError&) {
      e.hypothesis_id = h.id;
      rec.warnings.push_back(h.id + " has no valid generation-set verdict; not accepted");
    }
    accepted += e.accepted ? 1 : 0;
    json row = e;
    row["method"] = method_name(h.method);
    rows.push_back(std::move(row));
  }
  std::size_t errors = 0;
  for (const auto& v : verdicts) errors += v.valid() ? 0 : 1;
  write_jsonl_from(path("verdicts_gen.jsonl"), verdicts);
  write_jsonl(path("acceptance.jsonl"), rows);
  rec.counts = {{"hypotheses", hypotheses.size()},
                {"verdicts", verdicts.size()},
                {"invalid_verdicts", errors},
                {"accepted", accepted}};
  finish(Stage::JudgeGen, std::move(rec), {"verdicts_gen.jsonl", "acceptance.jsonl"});
}

void Runner::judge_heldout() {
  require("heldout.jsonl", Stage::Collect);
  require("acceptance.jsonl", Stage::JudgeGen);
  auto hypotheses = judged_hypotheses();
  auto heldout = read_jsonl_as<Triplet>(path("heldout.jsonl"));
  auto verdicts = judge_all(*gateway_, config_.models.judge, hypotheses, heldout, config_.seed * 2 + 1, config_.llm_gen,
                            config_.parallelism, prompts_);
  StageRecord rec;
  std::size_t errors = 0;
  for (const auto& v : verdicts) errors += v.valid() ? 0 : 1;
  write_jsonl_from(path("verdicts_heldout.jsonl"), verdicts);
  rec.counts = {{"hypotheses", hypotheses.size()}, {"verdicts", verdicts.size()}, {"invalid_verdicts", errors}};
  finish(Stage::JudgeHeldout, std::move(rec), {"verdicts_heldout.jsonl"});
}

void Runner::rate() {
  if (config_.models.raters.empty()) throw Error("rate needs [models] raters in the config");
  auto hypotheses = judged_hypotheses();
  if (hypotheses.empty()) require("hypotheses_llm.jsonl", Stage::DiffLlm);
  const RaterDimension dims[] = {RaterDimension::Interestingness, RaterDimension::Abstraction};
  const std::size_t tasks = hypotheses.size() * 2;
  std::vector<std::optional<RaterScore>> scores(tasks);
  std::vector<std::string> errors(tasks);
  gateway_->parallel_for(tasks, config_.parallelism, [&](std::size_t k) {
    try {
      scores[k] = rate_hypothesis(*gateway_, hypotheses[k / 2], dims[k % 2], config_.models.raters, config_.llm_gen,
                                  prompts_);
    } catch (const std::exception& e) {
      errors[k] = e.what();
    }
  });
  StageRecord rec;
  std::vector<json> rows;
  for (std::size_t k = 0; k < tasks; ++k) {
    if (scores[k]) {
      for (const auto& [rater, reason] : scores[k]->excluded) {
        rec.warnings.push_back("rater " + rater + " excluded for " + hypotheses[k / 2].id + ": " + reason);
      }
      rows.emplace_back(*scores[k]);
    } else {
      rec.warnings.push_back(errors[k]);
    }
  }
  write_jsonl(path("ratings.jsonl"), rows);
  rec.counts = {{"hypotheses", hypotheses.size()}, {"ratings", rows.size()}};
  finish(Stage::Rate, std::move(rec), {"ratings.jsonl"});
}

void Runner::report() {
  require("verdicts_heldout.jsonl", Stage::JudgeHeldout);
  require("acceptance.jsonl", Stage::JudgeGen);
  auto hypotheses = judged_hypotheses();
  auto verdicts = read_jsonl_as<Verdict>(path("verdicts_heldout.jsonl"));
  std::map<std::string, bool> accepted;
  for (const auto& row : read_jsonl(path("acceptance.jsonl"))) {
    accepted[row.at("hypothesis_id").get<std::string>()] = row.at("accepted").get<bool>();
  }
  std::map<std::pair<std::string, std::string>, double> ratings;
  if (fs::exists(path("ratings.jsonl"))) {
    for (const auto& s : read_jsonl_as<RaterScore>(path("ratings.jsonl"))) {
      ratings[{s.hypothesis_id, std::string(dimension_name(s.dimension))}] = s.mean;
    }
  }

  StageRecord rec;
  std::vector<HypothesisEval> evals;
  std::vector<ReportRow> rows;
  for (const auto& h : hypotheses) {
    HypothesisEval e;
    try {
      e = evaluate(h.id, verdicts);
    } catch (const PreconditionError&) {
      rec.warnings.push_back(h.id + " has no valid held-out verdict; left out of the report");
      continue;
    }
    auto acc_it = accepted.find(h.id);
    if (acc_it == accepted.end()) throw Error(h.id + " missing from acceptance.jsonl: run judge-gen first");
    e.accepted = acc_it->second;
    if (auto r = ratings.find({h.id, "interestingness"}); r != ratings.end()) e.interestingness = r->second;
    if (auto r = ratings.find({h.id, "abstraction"}); r != ratings.end()) e.abstraction = r->second;
    rows.push_back(make_report_row(h, e));
    evals.push_back(std::move(e));
  }

  std::string csv = "method,metric,mean,ci_half_width,n\n";
  for (Method m : {Method::Llm, Method::Sae, Method::Kl}) {
    std::vector<double> acceptance_values;
    std::map<std::string, std::vector<double>> metrics;
    for (const auto& r : rows) {
      if (r.method != m) continue;
      acceptance_values.push_back(r.accepted ? 1.0 : 0.0);
      if (!r.accepted) continue;
      metrics["frequency"].push_back(r.f);
      if (r.acc) metrics["accuracy"].push_back(*r.acc);
      metrics["vfd"].push_back(r.vfd);
      if (r.interestingness) metrics["interestingness"].push_back(*r.interestingness);
      if (r.abstraction) metrics["abstraction"].push_back(*r.abstraction);
    }
    if (acceptance_values.empty()) continue;
    auto line = [&](const std::string& metric, const std::vector<double>& values) {
      if (values.empty()) {
        csv += std::string(method_name(m)) + "," + metric + ",,,0\n";
        return;
      }
      auto ci = mean_ci(values);
      csv += std::string(method_name(m)) + "," + metric + "," + fmt(ci.mean) + "," +
             (ci.half_width ? fmt(*ci.half_width) : std::string()) + "," + std::to_string(ci.n) + "\n";
    };
    line("acceptance_rate", acceptance_values);
    for (const char* metric : {"frequency", "accuracy", "vfd", "interestingness", "abstraction"}) line(metric, metrics[metric]);
  }

  write_jsonl_from(path("eval.jsonl"), evals);
  write_jsonl_from(path("report.jsonl"), rows);
  write_text(path("summary.csv"), csv);
  rec.counts = {{"rows", rows.size()}};
  finish(Stage::Report, std::move(rec), {"eval.jsonl", "report.jsonl", "summary.csv"});
}

std::vector<ReportRow> Runner::report_rows() const {
  require("report.jsonl", Stage::Report);
  return read_jsonl_as<ReportRow>(path("report.jsonl"));
}

}  // namespace modeldiff
