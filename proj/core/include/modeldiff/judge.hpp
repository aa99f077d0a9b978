#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modeldiff/common.hpp"
#include "modeldiff/corpus.hpp"
#include "modeldiff/gateway.hpp"
#include "modeldiff/prompts.hpp"

namespace modeldiff {

inline constexpr std::size_t kMaxJudgeBatch = 10;

/// What the judge answered for one label. `Invalid` marks a label the judge
/// never answered usably; such verdicts carry no value.
enum class RawChoice { One, Two, NotApplicable, Invalid };

std::string_view raw_choice_name(RawChoice c);
RawChoice parse_raw_choice(std::string_view text);

struct JudgeRequest {
  std::vector<Hypothesis> hypotheses;  // labelled H1..Hk in order
  Triplet triplet;
  bool swapped = false;
  std::uint64_t rng_seed = 0;
};

struct Verdict {
  std::string hypothesis_id;
  std::string triplet_id;
  std::optional<int> value;  // -1, 0, 1; empty for Invalid
  RawChoice raw_choice = RawChoice::Invalid;
  bool swapped = false;
  std::string error;

  bool valid() const { return value.has_value(); }
  friend bool operator==(const Verdict&, const Verdict&) = default;
};

void to_json(json& j, const Verdict& v);
void from_json(const json& j, Verdict& v);

/// Maps a displayed choice back to a model and scores it against the
/// hypothesis direction: NA -> 0, matching model -> +1, other -> -1.
int resolve_verdict(RawChoice choice, bool swapped, Side direction);

/// Strict parse of the judge's JSON object. Keys must be exactly `labels`;
/// values 1, 2 or "N/A" ("1"/"2" strings are accepted as numbers).
std::map<std::string, RawChoice> parse_judge_output(const std::string& text, const std::vector<std::string>& labels);

/// Salvages what it can from a reply that failed the strict parse: labels
/// with a usable value are kept, the rest map to an error message.
struct PartialJudgeParse {
  std::map<std::string, RawChoice> choices;
  std::map<std::string, std::string> errors;
};
PartialJudgeParse parse_judge_partial(const std::string& text, const std::vector<std::string>& labels);

/// Swap decision for one request, drawn from a generator seeded with `seed`.
bool draw_swap(std::uint64_t seed);

/// Builds the JudgeRequest for a batch (swap drawn from `seed`).
JudgeRequest make_judge_request(std::vector<Hypothesis> hypotheses, Triplet triplet, std::uint64_t seed);

/// The rendered user turn for a request.
std::string render_judge_prompt(const JudgeRequest& request, const PromptLibrary& prompts = default_prompts());

/// One judge call (plus at most one reprompt) for up to 10 hypotheses.
/// Returns one verdict per hypothesis, in input order.
std::vector<Verdict> judge_batch(Gateway& gateway, const std::string& judge_model,
                                 const std::vector<Hypothesis>& hypotheses, const Triplet& triplet,
                                 std::uint64_t seed, const GenerationConfig& gen = {},
                                 const PromptLibrary& prompts = default_prompts());

/// Seed for the batch starting at `batch_index` on `triplet_id`, so swap
/// draws do not depend on scheduling order.
std::uint64_t batch_seed(std::uint64_t run_seed, const std::string& triplet_id, std::size_t batch_index);

/// Judges every hypothesis on every triplet in batches of 10. Output is
/// ordered by triplet, then hypothesis. A failed call turns its whole batch
/// into Invalid verdicts rather than aborting.
std::vector<Verdict> judge_all(Gateway& gateway, const std::string& judge_model,
                               const std::vector<Hypothesis>& hypotheses, const std::vector<Triplet>& triplets,
                               std::uint64_t seed, const GenerationConfig& gen, std::size_t parallelism,
                               const PromptLibrary& prompts = default_prompts());

}  // namespace modeldiff
