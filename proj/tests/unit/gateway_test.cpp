#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include <modeldiff/gateway.hpp>
#include <modeldiff/structured.hpp>

#include "test_util.hpp"

using namespace modeldiff;
using testutil::text_completion;

namespace {

ChatRequest request(std::string model, std::string user, int n = 1) {
  ChatRequest r;
  r.model = std::move(model);
  r.user = std::move(user);
  r.gen.n_samples = n;
  return r;
}

}  // namespace

TEST(GenerationConfig, Validation) {
  GenerationConfig g;
  EXPECT_NO_THROW(g.validate());
  g.max_new_tokens = 0;
  EXPECT_THROW(g.validate(), PreconditionError);
  g = {};
  g.temperature = -0.1;
  EXPECT_THROW(g.validate(), PreconditionError);
  g = {};
  g.top_logprobs = 21;
  EXPECT_THROW(g.validate(20), PreconditionError);
  EXPECT_NO_THROW(g.validate(25));
  g = {};
  g.n_samples = 0;
  EXPECT_THROW(g.validate(), PreconditionError);
  EXPECT_NE(GenerationConfig{}.hash(), (GenerationConfig{10, 0.0, std::nullopt, 1}.hash()));
}

TEST(PromptHash, UserOnlyIsPlainDigest) {
  ChatRequest r = request("m", "hello");
  EXPECT_EQ(prompt_hash(r), sha256_hex("hello"));
  r.system = "sys";
  EXPECT_EQ(prompt_hash(r), sha256_hex("sys\n\nhello"));
  r.assistant_prefix = "so";
  EXPECT_EQ(prompt_hash(r), sha256_hex("sys\n\nhello\n\n[assistant prefix]\nso"));
}

TEST(MockBackend, ScriptBeforeResponderAndSampleOrder) {
  MockScript script;
  script.add("m", prompt_hash("q"), {"first", std::nullopt});
  script.add("m", prompt_hash("q"), {"second", std::nullopt});
  script.add("m", prompt_hash("q"), {"third", std::nullopt});
  MockBackend backend(script);
  backend.set_responder("m", [](const ChatRequest&) { return text_completion("responder"); });

  auto two = backend.complete(request("m", "q", 2));
  ASSERT_EQ(two.samples.size(), 2u);
  EXPECT_EQ(two.samples[0].text, "first");
  EXPECT_EQ(two.samples[1].text, "second");
  EXPECT_EQ(backend.complete(request("m", "other")).text(), "responder");
  EXPECT_THROW(backend.complete(request("z", "q")), Error);
}

TEST(MockBackend, TruncatesToMaxNewTokens) {
  MockBackend backend;
  backend.set_responder("m", [](const ChatRequest&) { return text_completion("a b  c\nd e"); });
  auto r = request("m", "x");
  r.gen.max_new_tokens = 3;
  EXPECT_EQ(backend.complete(r).text(), "a b  c");
  EXPECT_EQ(truncate_tokens("one", 5), "one");
}

TEST(MockBackend, ScriptFileRoundTrip) {
  testutil::TempDir dir;
  MockScript script;
  LogprobDump lp{{"a"}, {{{"a", -0.1}, {"b", -2.0}}}};
  script.add("m", "h1", {"x", lp});
  script.add("m", "h1", {"y", std::nullopt});
  script.add("n", "h2", {"z", std::nullopt});
  script.save(dir / "s.jsonl");
  auto back = MockScript::load(dir / "s.jsonl");
  EXPECT_EQ(back.size(), 3u);
  ASSERT_NE(back.find("m", "h1"), nullptr);
  EXPECT_EQ(back.find("m", "h1")->at(1).response, "y");
  ASSERT_TRUE(back.find("m", "h1")->at(0).logprobs);
  EXPECT_EQ(back.find("m", "h1")->at(0).logprobs->tokens, std::vector<std::string>{"a"});
  EXPECT_EQ(back.find("q", "h1"), nullptr);
}

TEST(MockBackend, PseudoEmbeddingsAreUnitAndDeterministic) {
  MockBackend backend;
  auto e = backend.embed({"uses tables", "uses tables", "writes poems"});
  EXPECT_NEAR(e.row(0).norm(), 1.0, 1e-12);
  EXPECT_EQ(e.row(0), e.row(1));
  EXPECT_LT(e.row(0).dot(e.row(2)), 0.9);
  // Shared words pull embeddings together.
  auto f = backend.embed({"model uses markdown tables often", "model uses markdown tables", "closes with a question"});
  EXPECT_GT(f.row(0).dot(f.row(1)), f.row(0).dot(f.row(2)));
}

TEST(Gateway, RetriesTransientFailuresWithBackoff) {
  auto backend = std::make_shared<MockBackend>();
  backend->set_responder("m", [](const ChatRequest&) { return text_completion("ok"); });
  backend->fail_next("m", 2);
  GatewayOptions opt;
  opt.retry.initial_backoff = std::chrono::milliseconds(100);
  Gateway g(opt);
  std::vector<long long> sleeps;
  g.set_sleeper([&](std::chrono::milliseconds d) { sleeps.push_back(d.count()); });
  g.register_model("m", backend);
  EXPECT_EQ(g.complete_text("m", std::nullopt, "x"), "ok");
  EXPECT_EQ(sleeps, (std::vector<long long>{100, 200}));
  EXPECT_EQ(g.stats().retries, 2u);
}

TEST(Gateway, GivesUpAfterMaxAttempts) {
  auto backend = std::make_shared<MockBackend>();
  backend->set_responder("m", [](const ChatRequest&) { return text_completion("ok"); });
  backend->fail_next("m", 10);
  auto g = testutil::gateway_for(backend, {"m"});
  try {
    g->complete_text("m", std::nullopt, "x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("after 4 attempts"), std::string::npos);
  }
  EXPECT_EQ(g->stats().failures, 1u);
  EXPECT_THROW(g->complete_text("unknown", std::nullopt, "x"), UnknownModelError);
}

TEST(Gateway, CacheServesRepeatedRequests) {
  testutil::TempDir dir;
  std::atomic<int> calls{0};
  auto backend = std::make_shared<MockBackend>();
  backend->set_responder("m", [&](const ChatRequest& r) {
    ++calls;
    return text_completion("echo " + r.user);
  });
  GatewayOptions opt;
  opt.cache_dir = dir.path();
  Gateway g(opt);
  g.register_model("m", backend);
  EXPECT_EQ(g.complete_text("m", std::nullopt, "x"), "echo x");
  EXPECT_EQ(g.complete_text("m", std::nullopt, "x"), "echo x");
  EXPECT_EQ(calls.load(), 1);
  EXPECT_EQ(g.stats().cache_hits, 1u);
  // Different generation settings are a different key.
  g.complete_text("m", std::nullopt, "x", GenerationConfig{10, 0.0, std::nullopt, 1});
  EXPECT_EQ(calls.load(), 2);
}

TEST(Gateway, BudgetCapsInFlightCalls) {
  std::atomic<int> in_flight{0};
  std::atomic<int> peak{0};
  auto backend = std::make_shared<MockBackend>();
  backend->set_responder("m", [&](const ChatRequest&) {
    int now = ++in_flight;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
    --in_flight;
    return text_completion("ok");
  });
  auto g = testutil::gateway_for(backend, {"m"}, 3);
  std::vector<ChatRequest> reqs(40, request("m", "x"));
  auto out = g->complete_batch(reqs, 16);
  for (const auto& o : out) EXPECT_TRUE(o.ok());
  EXPECT_LE(peak.load(), 3);
}

TEST(Gateway, BatchKeepsPerItemFailures) {
  auto backend = std::make_shared<MockBackend>();
  backend->set_responder("m", [](const ChatRequest& r) {
    if (r.user == "bad") throw Error("boom");
    return text_completion(r.user);
  });
  auto g = testutil::gateway_for(backend, {"m"});
  auto out = g->complete_batch({request("m", "a"), request("m", "bad"), request("m", "c")}, 2);
  EXPECT_TRUE(out[0].ok());
  EXPECT_FALSE(out[1].ok());
  EXPECT_EQ(out[1].error(), "boom");
  EXPECT_EQ(out[2].value().text(), "c");
}

TEST(Gateway, ParallelForRethrowsLowestIndexError) {
  Gateway g;
  try {
    g.parallel_for(20, 4, [](std::size_t i) {
      if (i == 7 || i == 13) throw Error("fail " + std::to_string(i));
    });
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "fail 7");
  }
  EXPECT_THROW(g.parallel_for(1, 0, [](std::size_t) {}), PreconditionError);
}

TEST(Gateway, RejectsMalformedLogprobs) {
  auto backend = std::make_shared<MockBackend>();
  backend->set_responder("m", [](const ChatRequest&) {
    Completion c;
    c.samples.push_back({"x", LogprobDump{{"x"}, {{{"x", 0.5}}}}});
    return c;
  });
  auto g = testutil::gateway_for(backend, {"m"});
  EXPECT_THROW(g->complete(request("m", "q")), Error);
}

TEST(Gateway, EmbedChecksInput) {
  auto backend = std::make_shared<MockBackend>(MockScript{}, 16);
  auto g = testutil::gateway_for(backend, {});
  EXPECT_EQ(g->embed({"a", "b"}).rows(), 2);
  EXPECT_THROW(g->embed({"a", ""}), PreconditionError);
  Gateway bare;
  EXPECT_THROW(bare.embed({"a"}), Error);
}

TEST(RecordingBackend, ReplayReproducesResponses) {
  auto inner = std::make_shared<MockBackend>();
  inner->set_responder("m", [](const ChatRequest& r) {
    Completion c;
    for (int i = 0; i < r.gen.n_samples; ++i) c.samples.push_back({r.user + std::to_string(i), std::nullopt});
    return c;
  });
  auto rec = std::make_shared<RecordingBackend>(inner);
  rec->complete(request("m", "q", 1));
  rec->complete(request("m", "q", 3));
  rec->complete(request("m", "q", 2));
  MockBackend replay(rec->script());
  auto out = replay.complete(request("m", "q", 3));
  ASSERT_EQ(out.samples.size(), 3u);
  EXPECT_EQ(out.samples[2].text, "q2");
}

TEST(AskParsed, RepromptsOnceThenPropagates) {
  auto backend = std::make_shared<MockBackend>();
  std::atomic<int> calls{0};
  backend->set_responder("m", [&](const ChatRequest& r) {
    ++calls;
    bool retried = r.user.find("did not follow the required output format") != std::string::npos;
    return text_completion(retried && r.user.rfind("fixable", 0) == 0 ? "42" : "nope");
  });
  auto g = testutil::gateway_for(backend, {"m"});
  auto parse = [](const std::string& s) {
    if (s != "42") throw ParseError("bad", s);
    return 42;
  };
  EXPECT_EQ(ask_parsed(*g, "m", std::nullopt, "fixable", {}, parse), 42);
  EXPECT_EQ(calls.load(), 2);
  EXPECT_THROW(ask_parsed(*g, "m", std::nullopt, "hopeless", {}, parse), ParseError);
  EXPECT_EQ(calls.load(), 4);
}
