// modeldiff-fixture: writes the synthetic scenario inputs and records every
// model call of a full pipeline run into a replayable mock script.

#include <iostream>

#include <CLI11.hpp>

#include <modeldiff/runner.hpp>

#include "scenario.hpp"

namespace fs = std::filesystem;
using namespace modeldiff;

int main(int argc, char** argv) {
  CLI::App app{"Build the offline mock fixture"};
  std::string out;
  scenario::Options opt;
  app.add_option("--out", out, "Output directory")->required();
  app.add_option("--prompts", opt.n_prompts, "Number of prompts");
  app.add_option("--n-generation", opt.n_generation);
  app.add_option("--n-heldout", opt.n_heldout);
  app.add_option("--table-rate", opt.table_rate)->check(CLI::Range(0.0, 1.0));
  app.add_option("--seed", opt.seed);
  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path dir = out;
    scenario::write_inputs(dir, opt);
    RunConfig config = load_config(dir / "config.ini");
    auto recorder = std::make_shared<RecordingBackend>(scenario::make_backend(opt));
    Runner runner(config, dir / "recording_run", scenario::make_gateway(recorder, config.parallelism));
    runner.run_all();
    recorder->script().save(dir / "script.jsonl");
    fs::remove_all(dir / "recording_run");
    std::cerr << "fixture written to " << dir << " (" << recorder->script().size() << " script keys)\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
