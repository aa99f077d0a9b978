#pragma once

// Synthetic model pair with planted differences, plus rule-based stand-ins for
// every LLM role the pipeline calls. Used to build the bundled mock fixture and
// by the end-to-end tests.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <modeldiff/corpus.hpp>
#include <modeldiff/diff_sae.hpp>
#include <modeldiff/gateway.hpp>

namespace modeldiff::scenario {

struct Options {
  std::size_t n_prompts = 1500;
  std::size_t n_generation = 1000;
  std::size_t n_heldout = 500;
  double table_rate = 0.12;  // share of prompts where Model B adds a Markdown table
  double math_rate = 0.05;   // share of prompts asking for a formula
  int tokens_a = 65;         // length target before the last sentence overshoots it
  int tokens_b = 495;
  std::uint64_t seed = 7;
};

namespace models {
inline const std::string kA = "model-a";
inline const std::string kB = "model-b";
inline const std::string kExtractor = "extractor";
inline const std::string kSummarizer = "summarizer";
inline const std::string kJudge = "judge";
inline const std::vector<std::string> kRaters = {"rater-1", "rater-2", "rater-3"};
inline const std::string kRelabeler = "relabeler";
inline const std::string kSaeSummarizer = "sae-summarizer";
inline const std::string kPhrasing = "phrasing";
inline const std::string kKlHypothesizer = "kl-hypothesizer";
}  // namespace models

std::vector<PromptRecord> make_prompts(const Options& opt);

bool wants_table(const std::string& prompt, const Options& opt);
bool is_math_prompt(const std::string& prompt);
bool has_table(const std::string& text);

std::string response_a(const std::string& prompt, const Options& opt);
std::string response_b(const std::string& prompt, const Options& opt);

/// Registers a responder for every scenario model on `backend`.
void install_responders(MockBackend& backend, const Options& opt);

/// Leading-whitespace tokenization: concatenating the tokens gives the text back.
std::vector<std::string> tokenize(const std::string& text);

ActivationDump make_sae_dump(const std::vector<PromptRecord>& prompts, Side side, const Options& opt);

/// Writes prompts.jsonl, sae_a.jsonl, sae_b.jsonl, sae_labels.jsonl,
/// kl_dumps/<id>.jsonl and config.ini into `dir`.
void write_inputs(const std::filesystem::path& dir, const Options& opt);

/// Mock backend with the scenario responders installed.
std::shared_ptr<MockBackend> make_backend(const Options& opt);

/// Gateway routing every scenario model (and embeddings) to `backend`.
std::shared_ptr<Gateway> make_gateway(std::shared_ptr<Backend> backend, std::size_t parallelism = 8);

}  // namespace modeldiff::scenario
