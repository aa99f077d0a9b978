#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "modeldiff/common.hpp"
#include "modeldiff/gateway.hpp"
#include "modeldiff/prompts.hpp"

namespace modeldiff {

/// Probability assigned to a token listed by one model but not the other.
inline constexpr double kMissingTokenFloor = 1e-6;

struct ForkScore {
  std::size_t position = 0;
  double kl = 0.0;  // nats
  double h1 = 0.0;
  double h2 = 0.0;
  double score = 0.0;  // kl / (h1 + h2), 0 when both entropies vanish
};

/// KL(P1 || P2) and entropies over the union of the listed tokens, after
/// flooring missing tokens and renormalizing each side.
ForkScore positional_score(const std::vector<TokenLogprob>& top1, const std::vector<TokenLogprob>& top2);

struct ForkPoint {
  std::string triplet_id;
  std::string prompt;
  Side generator = Side::A;  // model that produced the scanned response
  std::string prefix;        // response tokens before the fork
  std::string fork_token;
  ForkScore score;
};

void to_json(json& j, const ForkPoint& f);
void from_json(const json& j, ForkPoint& f);

/// Per-position {"pos","token","top1","top2"} lines. top1 belongs to the
/// generating model, top2 to the other one.
std::pair<LogprobDump, LogprobDump> load_fork_dump(const std::filesystem::path& path);
void save_fork_dump(const std::filesystem::path& path, const LogprobDump& generator, const LogprobDump& other);

/// The `top_n` highest-scoring positions of one response, score descending,
/// earlier position first on ties. Both dumps must cover the same tokens.
std::vector<ForkPoint> find_fork_tokens(const std::string& triplet_id, const std::string& prompt, Side generator,
                                        const LogprobDump& generator_dump, const LogprobDump& other_dump,
                                        std::size_t top_n);

struct ForkSamples {
  std::vector<std::string> completions_a;
  std::vector<std::string> completions_b;
};

void to_json(json& j, const ForkSamples& s);

/// n continuations per model from the fork prefix. Uses assistant prefill when
/// the model's backend supports it, otherwise the continuation template.
ForkSamples sample_fork_completions(Gateway& gateway, const std::string& model_a, const std::string& model_b,
                                    const ForkPoint& fork, int n = 20, double temperature = 1.0,
                                    int max_tokens = 32, const PromptLibrary& prompts = default_prompts());

/// Asks `model` for differences between the two completion sets and turns
/// each uniquely attributed one into a direction-carrying hypothesis, then
/// passes it through adjust_phrasing. Ids are left empty for the caller.
std::vector<Hypothesis> hypothesize_from_forks(Gateway& gateway, const std::string& model,
                                               const std::string& phrasing_model, const ForkPoint& fork,
                                               const ForkSamples& samples, const GenerationConfig& gen,
                                               std::vector<std::string>& warnings,
                                               const PromptLibrary& prompts = default_prompts());

/// "⟨MODEL⟩ uses X" -> "Uses X"; other placements are kept verbatim.
std::string claim_from_neutral(const std::string& neutral_text);

}  // namespace modeldiff
