// modeldiff: stage-by-stage command line for the diffing pipeline.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <modeldiff/runner.hpp>

namespace fs = std::filesystem;
using namespace modeldiff;

namespace {

struct Common {
  std::string config;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> models;
  std::optional<std::string> mock;
  std::optional<std::size_t> min_cluster_size;
  std::optional<double> direction_threshold;
  std::optional<std::size_t> n_hypotheses;
  std::optional<std::size_t> top_n_forks;
  ReportFilter filter;
};

void apply_overrides(RunConfig& config, const Common& c) {
  if (c.seed) config.seed = *c.seed;
  for (const auto& m : c.models) {
    auto eq = m.find('=');
    if (eq == std::string::npos) throw Error("--models expects A=id B=id, got '" + m + "'");
    const std::string side = m.substr(0, eq);
    const std::string id = m.substr(eq + 1);
    if (id.empty()) throw Error("--models: empty model id for " + side);
    if (side == "A") {
      config.models.a = id;
    } else if (side == "B") {
      config.models.b = id;
    } else {
      throw Error("--models: unknown side '" + side + "'");
    }
  }
  if (c.min_cluster_size) config.min_cluster_size = *c.min_cluster_size;
  if (c.direction_threshold) config.direction_threshold = *c.direction_threshold;
  if (c.n_hypotheses) config.n_hypotheses = *c.n_hypotheses;
  if (c.top_n_forks) config.top_n_forks = *c.top_n_forks;
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}

void print_report(const std::vector<ReportRow>& rows) {
  std::printf("%-8s %-4s %-3s %6s %6s %7s %4s %5s %5s  %s\n", "id", "meth", "dir", "f", "acc", "vfd", "acc?", "int",
              "abs", "hypothesis");
  for (const auto& r : rows) {
    std::printf("%-8s %-4s %-3c %6.3f %6s %+7.3f %4s %5s %5s  %s\n", r.hypothesis_id.c_str(),
                std::string(method_name(r.method)).c_str(), side_char(r.direction), r.f, fmt(r.acc).c_str(), r.vfd,
                r.accepted ? "yes" : "no", fmt(r.interestingness).c_str(), fmt(r.abstraction).c_str(),
                r.text.c_str());
  }
}

bool has_filter(const ReportFilter& f) {
  return f.min_f || f.min_acc || f.min_interestingness || f.abstraction_min || f.abstraction_max;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surface and evaluate behavioral differences between two chat models"};
  app.require_subcommand(1);
  Common c;

  app.add_option("--config", c.config, "Run configuration file")->required()->check(CLI::ExistingFile);
  app.add_option("--run-dir", c.run_dir, "Directory holding the run artifacts")->required();
  app.add_option("--seed", c.seed, "Override the run seed");
  app.add_option("--models", c.models, "Override compared models: A=id B=id")->expected(1, 2);
  app.add_option("--mock", c.mock, "Replay a recorded mock script instead of calling the provider")
      ->check(CLI::ExistingFile);
  app.add_option("--min-cluster-size", c.min_cluster_size);
  app.add_option("--direction-threshold", c.direction_threshold)->check(CLI::Range(0.5, 1.0));
  app.add_option("--n-hypotheses", c.n_hypotheses);
  app.add_option("--top-n-forks", c.top_n_forks);

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"collect", "Query both models on the prompt set and split the corpus"},
      {"diff-llm", "Extract, cluster and summarize differences into hypotheses"},
      {"diff-sae", "Hypotheses from SAE feature frequency differences"},
      {"kl-fork", "Fork tokens and hypotheses from logprob dumps"},
      {"judge-gen", "Judge hypotheses on the generation split (acceptance)"},
      {"judge-heldout", "Judge hypotheses on the held-out split"},
      {"rate", "Interestingness and abstraction autoraters"},
      {"report", "Metrics, report rows and summary CSV"},
  };
  for (const auto& [name, help] : stages) {
    auto* sub = app.add_subcommand(name, help);
    if (name == "report") {
      sub->add_option("--min-f", c.filter.min_f);
      sub->add_option("--min-acc", c.filter.min_acc);
      sub->add_option("--min-interestingness", c.filter.min_interestingness);
      sub->add_option("--abstraction-min", c.filter.abstraction_min);
      sub->add_option("--abstraction-max", c.filter.abstraction_max);
    }
  }
  app.add_subcommand("all", "Run every configured stage in order");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig config = load_config(c.config);
    apply_overrides(config, c);
    std::optional<fs::path> mock;
    if (c.mock) mock = fs::path(*c.mock);
    Runner runner(config, c.run_dir, make_gateway(config, mock));

    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "all") {
      runner.run_all();
    } else {
      runner.run(parse_stage(name));
    }

    for (const auto& [stage, record] : runner.manifest().stages) {
      if (name != "all" && stage != name) continue;
      const auto& ws = record.warnings;
      for (std::size_t i = 0; i < ws.size() && i < 5; ++i) std::cerr << "warning [" << stage << "]: " << ws[i] << "\n";
      if (ws.size() > 5) std::cerr << "warning [" << stage << "]: " << ws.size() - 5 << " more in manifest.json\n";
    }
    if (name == "report" || name == "all") {
      auto rows = runner.report_rows();
      if (has_filter(c.filter)) {
        const auto total = rows.size();
        rows = filter_report(rows, c.filter);
        write_jsonl_from(runner.run_dir() / "report_filtered.jsonl", rows);
        std::cerr << rows.size() << " of " << total << " rows kept in report_filtered.jsonl\n";
      }
      print_report(rows);
    }
    std::cerr << "run " << runner.manifest().run_id << " stage " << name << " done\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
