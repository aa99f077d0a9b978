#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modeldiff/common.hpp"
#include "modeldiff/gateway.hpp"
#include "modeldiff/judge.hpp"
#include "modeldiff/prompts.hpp"

namespace modeldiff {

// ---- verdict metrics ----------------------------------------------------------
// All take resolved verdict values in {-1, 0, 1}; invalid verdicts are dropped
// by the caller before they get here.

/// Share of verdicts where the behavior shows up at all. Throws on empty input.
double frequency(std::span<const int> values);
/// Among non-zero verdicts, the share pointing at the hypothesized model.
/// Empty when every verdict is 0.
std::optional<double> accuracy(std::span<const int> values);
/// (#correct - #wrong) / n.
double vfd(std::span<const int> values);

/// Resolved values of the valid verdicts for one hypothesis.
std::vector<int> values_for(const std::string& hypothesis_id, const std::vector<Verdict>& verdicts);

struct HypothesisEval {
  std::string hypothesis_id;
  std::size_t n = 0;         // valid verdicts
  std::size_t n_errors = 0;  // invalid verdicts, excluded from n
  double f = 0.0;
  std::optional<double> acc;
  double vfd = 0.0;
  bool accepted = false;
  std::optional<double> interestingness;
  std::optional<double> abstraction;

  friend bool operator==(const HypothesisEval&, const HypothesisEval&) = default;
};

void to_json(json& j, const HypothesisEval& e);
void from_json(const json& j, HypothesisEval& e);

/// Frequency, accuracy and vfd over the valid verdicts of one hypothesis.
/// Throws when there is none.
HypothesisEval evaluate(const std::string& hypothesis_id, const std::vector<Verdict>& verdicts);

/// f > 0 and acc > 0.5.
bool is_accepted(std::span<const int> values);

struct AcceptanceResult {
  double rate = 0.0;
  std::vector<std::string> accepted_ids;
  std::vector<HypothesisEval> evals;  // generation-set metrics, one per hypothesis
};

/// Throws when a hypothesis has no valid generation-set verdict.
AcceptanceResult acceptance(const std::vector<Hypothesis>& hypotheses, const std::vector<Verdict>& generation_verdicts);

struct MeanCi {
  double mean = 0.0;
  std::optional<double> half_width;  // empty for n < 2
  std::size_t n = 0;
};

/// Student-t interval on the mean with n-1 degrees of freedom.
MeanCi mean_ci(std::span<const double> values, double level = 0.95);

// ---- autoraters ---------------------------------------------------------------

enum class RaterDimension { Interestingness, Abstraction };

std::string_view dimension_name(RaterDimension d);
RaterDimension parse_dimension(std::string_view text);

struct RaterScore {
  std::string hypothesis_id;
  RaterDimension dimension = RaterDimension::Interestingness;
  std::vector<std::pair<std::string, int>> per_rater;
  double mean = 0.0;
  std::vector<std::pair<std::string, std::string>> excluded;  // rater -> reason
};

void to_json(json& j, const RaterScore& s);
void from_json(const json& j, RaterScore& s);

/// The claim as shown to raters: "Model A <text> more than Model B".
std::string directional_text(const Hypothesis& h);

/// Reads the integer score from {"score", "rationale", "signals"}. Throws
/// ParseError on grammar violations; range is checked by the caller.
int parse_rater_output(const std::string& text);

/// Asks every rater (one reprompt each on a grammar violation). Unusable or
/// out-of-scale replies exclude that rater; throws when none is left.
RaterScore rate_hypothesis(Gateway& gateway, const Hypothesis& hypothesis, RaterDimension dimension,
                           const std::vector<std::string>& raters, const GenerationConfig& gen = {},
                           const PromptLibrary& prompts = default_prompts());

}  // namespace modeldiff
