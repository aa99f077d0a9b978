#include "modeldiff/metrics.hpp"

#include <cctype>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "modeldiff/structured.hpp"

namespace modeldiff {

namespace {

struct Counts {
  std::size_t correct = 0;
  std::size_t wrong = 0;
  std::size_t n = 0;
};

Counts count(std::span<const int> values) {
  Counts c;
  for (int v : values) {
    if (v == 1) {
      ++c.correct;
    } else if (v == -1) {
      ++c.wrong;
    } else if (v != 0) {
      throw PreconditionError("verdict value outside {-1, 0, 1}: " + std::to_string(v));
    }
  }
  c.n = values.size();
  return c;
}

}  // namespace

double frequency(std::span<const int> values) {
  if (values.empty()) throw PreconditionError("frequency needs at least one verdict");
  auto c = count(values);
  return static_cast<double>(c.correct + c.wrong) / static_cast<double>(c.n);
}

std::optional<double> accuracy(std::span<const int> values) {
  if (values.empty()) throw PreconditionError("accuracy needs at least one verdict");
  auto c = count(values);
  if (c.correct + c.wrong == 0) return std::nullopt;
  return static_cast<double>(c.correct) / static_cast<double>(c.correct + c.wrong);
}

double vfd(std::span<const int> values) {
  if (values.empty()) throw PreconditionError("vfd needs at least one verdict");
  auto c = count(values);
  return (static_cast<double>(c.correct) - static_cast<double>(c.wrong)) / static_cast<double>(c.n);
}

std::vector<int> values_for(const std::string& hypothesis_id, const std::vector<Verdict>& verdicts) {
  std::vector<int> out;
  for (const auto& v : verdicts) {
    if (v.hypothesis_id == hypothesis_id && v.value) out.push_back(*v.value);
  }
  return out;
}

namespace {

json opt(const std::optional<double>& x) { return x ? json(*x) : json(nullptr); }

std::optional<double> opt_double(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

void to_json(json& j, const HypothesisEval& e) {
  j = json{{"hypothesis_id", e.hypothesis_id},
           {"n", e.n},
           {"n_errors", e.n_errors},
           {"f", e.f},
           {"acc", opt(e.acc)},
           {"vfd", e.vfd},
           {"accepted", e.accepted},
           {"interestingness", opt(e.interestingness)},
           {"abstraction", opt(e.abstraction)}};
}

void from_json(const json& j, HypothesisEval& e) {
  e.hypothesis_id = j.at("hypothesis_id").get<std::string>();
  e.n = j.at("n").get<std::size_t>();
  e.n_errors = j.value("n_errors", std::size_t{0});
  e.f = j.at("f").get<double>();
  e.acc = opt_double(j, "acc");
  e.vfd = j.at("vfd").get<double>();
  e.accepted = j.at("accepted").get<bool>();
  e.interestingness = opt_double(j, "interestingness");
  e.abstraction = opt_double(j, "abstraction");
}

HypothesisEval evaluate(const std::string& hypothesis_id, const std::vector<Verdict>& verdicts) {
  HypothesisEval e;
  e.hypothesis_id = hypothesis_id;
  std::vector<int> values;
  for (const auto& v : verdicts) {
    if (v.hypothesis_id != hypothesis_id) continue;
    if (v.value) {
      values.push_back(*v.value);
    } else {
      ++e.n_errors;
    }
  }
  if (values.empty()) throw PreconditionError("no valid verdicts for hypothesis " + hypothesis_id);
  e.n = values.size();
  e.f = frequency(values);
  e.acc = accuracy(values);
  e.vfd = vfd(values);
  e.accepted = is_accepted(values);
  return e;
}

bool is_accepted(std::span<const int> values) {
  if (values.empty()) return false;
  auto acc = accuracy(values);
  return frequency(values) > 0.0 && acc && *acc > 0.5;
}

AcceptanceResult acceptance(const std::vector<Hypothesis>& hypotheses, const std::vector<Verdict>& generation_verdicts) {
  AcceptanceResult out;
  if (hypotheses.empty()) return out;
  for (const auto& h : hypotheses) {
    auto e = evaluate(h.id, generation_verdicts);
    if (e.accepted) out.accepted_ids.push_back(h.id);
    out.evals.push_back(std::move(e));
  }
  out.rate = static_cast<double>(out.accepted_ids.size()) / static_cast<double>(hypotheses.size());
  return out;
}

MeanCi mean_ci(std::span<const double> values, double level) {
  if (values.empty()) throw PreconditionError("mean_ci needs at least one value");
  if (!(level > 0.0 && level < 1.0)) throw PreconditionError("confidence level must be in (0, 1)");
  MeanCi out;
  out.n = values.size();
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) return out;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  const double s = std::sqrt(ss / (n - 1.0));
  boost::math::students_t dist(n - 1.0);
  const double t = boost::math::quantile(dist, (1.0 + level) / 2.0);
  out.half_width = t * s / std::sqrt(n);
  return out;
}

// ---- autoraters ---------------------------------------------------------------

std::string_view dimension_name(RaterDimension d) {
  return d == RaterDimension::Interestingness ? "interestingness" : "abstraction";
}

RaterDimension parse_dimension(std::string_view text) {
  if (text == "interestingness") return RaterDimension::Interestingness;
  if (text == "abstraction") return RaterDimension::Abstraction;
  throw Error("invalid rater dimension '" + std::string(text) + "'");
}

void to_json(json& j, const RaterScore& s) {
  json per = json::array();
  for (const auto& [rater, score] : s.per_rater) per.push_back({{"rater", rater}, {"score", score}});
  json excluded = json::array();
  for (const auto& [rater, reason] : s.excluded) excluded.push_back({{"rater", rater}, {"reason", reason}});
  j = json{{"hypothesis_id", s.hypothesis_id},
           {"dimension", dimension_name(s.dimension)},
           {"per_rater", std::move(per)},
           {"mean", s.mean},
           {"excluded", std::move(excluded)}};
}

void from_json(const json& j, RaterScore& s) {
  s.hypothesis_id = j.at("hypothesis_id").get<std::string>();
  s.dimension = parse_dimension(j.at("dimension").get<std::string>());
  s.per_rater.clear();
  for (const auto& r : j.at("per_rater")) s.per_rater.emplace_back(r.at("rater").get<std::string>(), r.at("score").get<int>());
  s.mean = j.at("mean").get<double>();
  s.excluded.clear();
  if (j.contains("excluded")) {
    for (const auto& r : j.at("excluded")) {
      s.excluded.emplace_back(r.at("rater").get<std::string>(), r.at("reason").get<std::string>());
    }
  }
}

std::string directional_text(const Hypothesis& h) {
  std::string text = h.text;
  if (!text.empty() && std::isupper(static_cast<unsigned char>(text[0])) &&
      (text.size() < 2 || !std::isupper(static_cast<unsigned char>(text[1])))) {
    text[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(text[0])));
  }
  return "Model " + std::string(1, side_char(h.direction)) + " " + text + " more than Model " +
         std::string(1, side_char(other(h.direction)));
}

int parse_rater_output(const std::string& text) {
  json doc;
  try {
    doc = json::parse(strip_code_fence(text));
  } catch (const json::parse_error&) {
    throw ParseError("rater output is not JSON", text);
  }
  if (!doc.is_object()) throw ParseError("rater output is not a JSON object", text);
  for (const char* key : {"score", "rationale", "signals"}) {
    if (!doc.contains(key)) throw ParseError(std::string("rater output lacks ") + key, text);
  }
  if (!doc["score"].is_number_integer()) throw ParseError("score is not an integer", text);
  if (!doc["rationale"].is_string()) throw ParseError("rationale is not a string", text);
  if (!doc["signals"].is_object()) throw ParseError("signals is not an object", text);
  return doc["score"].get<int>();
}

RaterScore rate_hypothesis(Gateway& gateway, const Hypothesis& hypothesis, RaterDimension dimension,
                           const std::vector<std::string>& raters, const GenerationConfig& gen,
                           const PromptLibrary& prompts) {
  if (raters.empty()) throw PreconditionError("rate_hypothesis needs at least one rater");
  const bool interesting = dimension == RaterDimension::Interestingness;
  const std::string& system = prompts.get(interesting ? "rater_interestingness" : "rater_abstraction");
  const std::string user = prompts.render(
      "rater_user", {{"calibration", prompts.get(interesting ? "calibration_interestingness" : "calibration_abstraction")},
                     {"hypothesis", directional_text(hypothesis)}});

  RaterScore out;
  out.hypothesis_id = hypothesis.id;
  out.dimension = dimension;
  for (const auto& rater : raters) {
    try {
      int score = ask_parsed(gateway, rater, system, user, gen, parse_rater_output);
      if (score < 1 || score > 5) {
        out.excluded.emplace_back(rater, "score " + std::to_string(score) + " outside 1-5");
        continue;
      }
      out.per_rater.emplace_back(rater, score);
    } catch (const std::exception& e) {
      out.excluded.emplace_back(rater, e.what());
    }
  }
  if (out.per_rater.empty()) {
    throw Error("every rater failed for " + hypothesis.id + " (" + std::string(dimension_name(dimension)) + ")");
  }
  double sum = 0.0;
  for (const auto& [rater, score] : out.per_rater) sum += score;
  out.mean = sum / static_cast<double>(out.per_rater.size());
  return out;
}

}  // namespace modeldiff
