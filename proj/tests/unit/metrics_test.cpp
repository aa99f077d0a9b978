#include <gtest/gtest.h>

#include <random>

#include <modeldiff/metrics.hpp>

#include "test_util.hpp"

using namespace modeldiff;
using testutil::text_completion;

TEST(VerdictMetrics, WorkedExamples) {
  std::vector<int> v{1, 1, 1, -1, 0, 0, 0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(frequency(v), 0.4);
  EXPECT_DOUBLE_EQ(*accuracy(v), 0.75);
  EXPECT_DOUBLE_EQ(vfd(v), 0.2);
  EXPECT_TRUE(is_accepted(v));

  std::vector<int> zeros(5, 0);
  EXPECT_DOUBLE_EQ(frequency(zeros), 0.0);
  EXPECT_FALSE(accuracy(zeros));
  EXPECT_FALSE(is_accepted(zeros));

  std::vector<int> even{1, -1};
  EXPECT_DOUBLE_EQ(*accuracy(even), 0.5);
  EXPECT_FALSE(is_accepted(even));

  std::vector<int> empty;
  EXPECT_THROW(frequency(empty), PreconditionError);
  std::vector<int> bad{2};
  EXPECT_THROW(vfd(bad), PreconditionError);
}

TEST(VerdictMetrics, VfdIdentityHoldsOnRandomVectors) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(1, 200);
  std::uniform_int_distribution<int> val(-1, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> v(static_cast<std::size_t>(len(rng)));
    for (auto& x : v) x = val(rng);
    const double f = frequency(v);
    const auto a = accuracy(v);
    const double expected = a ? f * (2.0 * *a - 1.0) : 0.0;
    EXPECT_NEAR(vfd(v), expected, 1e-12);
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
    EXPECT_LE(std::abs(vfd(v)), f + 1e-15);
  }
}

TEST(Evaluate, InvalidVerdictsAreCountedSeparately) {
  std::vector<Verdict> vs{{"h", "t1", 1, RawChoice::One, false, ""},
                          {"h", "t2", std::nullopt, RawChoice::Invalid, false, "x"},
                          {"h", "t3", 0, RawChoice::NotApplicable, false, ""},
                          {"g", "t1", -1, RawChoice::Two, false, ""}};
  auto e = evaluate("h", vs);
  EXPECT_EQ(e.n, 2u);
  EXPECT_EQ(e.n_errors, 1u);
  EXPECT_DOUBLE_EQ(e.f, 0.5);
  EXPECT_TRUE(e.accepted);
  EXPECT_EQ(values_for("g", vs), std::vector<int>{-1});
  EXPECT_THROW(evaluate("nobody", vs), PreconditionError);
  json j = e;
  EXPECT_EQ(j.get<HypothesisEval>(), e);
}

TEST(Acceptance, RateOverHypotheses) {
  std::vector<Hypothesis> hs{{"h1", "x"}, {"h2", "y"}};
  std::vector<Verdict> vs{{"h1", "t", 1, RawChoice::One, false, ""}, {"h2", "t", -1, RawChoice::Two, false, ""}};
  auto r = acceptance(hs, vs);
  EXPECT_DOUBLE_EQ(r.rate, 0.5);
  EXPECT_EQ(r.accepted_ids, std::vector<std::string>{"h1"});
  EXPECT_EQ(r.evals.size(), 2u);
  EXPECT_DOUBLE_EQ(acceptance({}, vs).rate, 0.0);
}

TEST(MeanCi, StudentT) {
  std::vector<double> two{0.0, 1.0};
  auto ci = mean_ci(two);
  EXPECT_DOUBLE_EQ(ci.mean, 0.5);
  // t(0.975, 1) = 12.706; s = 0.7071; half width = 12.706 * 0.7071 / sqrt(2).
  EXPECT_NEAR(*ci.half_width, 6.353, 1e-3);
  std::vector<double> one{3.0};
  EXPECT_FALSE(mean_ci(one).half_width);
  std::vector<double> many(30, 2.0);
  EXPECT_DOUBLE_EQ(*mean_ci(many).half_width, 0.0);
  std::vector<double> none;
  EXPECT_THROW(mean_ci(none), PreconditionError);
  EXPECT_THROW(mean_ci(two, 1.0), PreconditionError);
}

TEST(Raters, DirectionalText) {
  EXPECT_EQ(directional_text({"h", "Uses tables", Side::B}), "Model B uses tables more than Model A");
  EXPECT_EQ(directional_text({"h", "HTML tables", Side::A}), "Model A HTML tables more than Model B");
}

TEST(Raters, ParseGrammar) {
  EXPECT_EQ(parse_rater_output(R"({"score": 4, "rationale": "r", "signals": {}})"), 4);
  EXPECT_EQ(parse_rater_output("```json\n{\"score\": 2, \"rationale\": \"\", \"signals\": {\"a\": 1}}\n```"), 2);
  EXPECT_THROW(parse_rater_output(R"({"score": 4, "rationale": "r"})"), ParseError);
  EXPECT_THROW(parse_rater_output(R"({"score": 4.5, "rationale": "r", "signals": {}})"), ParseError);
  EXPECT_THROW(parse_rater_output(R"({"score": 4, "rationale": 1, "signals": {}})"), ParseError);
  EXPECT_THROW(parse_rater_output("four"), ParseError);
}

TEST(Raters, OutOfScaleAndBrokenRatersAreExcluded) {
  auto backend = std::make_shared<MockBackend>();
  backend->set_responder("r1", [](const ChatRequest&) { return text_completion(R"({"score": 5, "rationale": "", "signals": {}})"); });
  backend->set_responder("r2", [](const ChatRequest&) { return text_completion(R"({"score": 3, "rationale": "", "signals": {}})"); });
  backend->set_responder("r3", [](const ChatRequest&) { return text_completion(R"({"score": 9, "rationale": "", "signals": {}})"); });
  backend->set_responder("r4", [](const ChatRequest&) { return text_completion("no"); });
  auto g = testutil::gateway_for(backend, {"r1", "r2", "r3", "r4"});
  Hypothesis h{"h1", "Uses tables", Side::A};
  auto s = rate_hypothesis(*g, h, RaterDimension::Interestingness, {"r1", "r2", "r3", "r4"});
  EXPECT_DOUBLE_EQ(s.mean, 4.0);
  EXPECT_EQ(s.per_rater.size(), 2u);
  ASSERT_EQ(s.excluded.size(), 2u);
  EXPECT_EQ(s.excluded[0].first, "r3");
  EXPECT_THROW(rate_hypothesis(*g, h, RaterDimension::Abstraction, {"r3", "r4"}), Error);
  EXPECT_THROW(rate_hypothesis(*g, h, RaterDimension::Abstraction, {}), PreconditionError);
  json j = s;
  auto back = j.get<RaterScore>();
  EXPECT_EQ(back.per_rater, s.per_rater);
  EXPECT_EQ(back.excluded, s.excluded);
}

TEST(Raters, PromptCarriesDimensionAndDirection) {
  auto backend = std::make_shared<MockBackend>();
  std::string system;
  std::string user;
  backend->set_responder("r", [&](const ChatRequest& req) {
    system = req.system.value_or("");
    user = req.user;
    return text_completion(R"({"score": 1, "rationale": "", "signals": {}})");
  });
  auto g = testutil::gateway_for(backend, {"r"});
  rate_hypothesis(*g, {"h", "Uses tables", Side::B}, RaterDimension::Interestingness, {"r"});
  EXPECT_NE(system.find("Interestingness Autorater"), std::string::npos);
  EXPECT_NE(user.find("Model B uses tables more than Model A"), std::string::npos);
}
