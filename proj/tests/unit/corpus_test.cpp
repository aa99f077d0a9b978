#include <gtest/gtest.h>

#include <random>
#include <set>

#include <modeldiff/corpus.hpp>

#include "test_util.hpp"

using namespace modeldiff;

namespace {

std::vector<Triplet> make_triplets(std::size_t n) {
  std::vector<Triplet> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto id = "p" + std::to_string(i);
    out.push_back({id, "prompt " + id, "a", "b", "ma", "mb"});
  }
  return out;
}

std::string error_of(const std::filesystem::path& p) {
  try {
    load_prompts(p);
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(LoadPrompts, ReadsAndLimits) {
  testutil::TempDir dir;
  write_text(dir / "p.jsonl",
             "{\"id\": \"x\", \"text\": \"first\", \"meta\": {\"k\": 3}}\n\n{\"id\": \"y\", \"text\": \"second\"}\n");
  auto all = load_prompts(dir / "p.jsonl");
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all[0].meta.at("k"), "3");
  EXPECT_EQ(load_prompts(dir / "p.jsonl", 1).size(), 1u);
}

TEST(LoadPrompts, ErrorsNameLineOrId) {
  testutil::TempDir dir;
  write_text(dir / "a.jsonl", "{\"id\": \"x\", \"text\": \"t\"}\n{\"id\": \"y\"}\n");
  EXPECT_EQ(error_of(dir / "a.jsonl"), "line 2: missing field text");
  write_text(dir / "b.jsonl", "{\"id\": \"x\", \"text\": \"t\"}\n{\"id\": \"x\", \"text\": \"u\"}\n");
  EXPECT_NE(error_of(dir / "b.jsonl").find("duplicate id x"), std::string::npos);
  write_text(dir / "c.jsonl", "[1]\n");
  EXPECT_EQ(error_of(dir / "c.jsonl"), "line 1: expected a JSON object");
  EXPECT_NE(error_of(dir / "none.jsonl").find("cannot open"), std::string::npos);
}

TEST(CollectPairs, SkipsFailedPromptsAndKeepsOrder) {
  auto backend = std::make_shared<MockBackend>();
  backend->set_responder("a", [](const ChatRequest& r) { return testutil::text_completion("A:" + r.user); });
  backend->set_responder("b", [](const ChatRequest& r) {
    if (r.user == "p2") throw Error("b is down");
    return testutil::text_completion("B:" + r.user);
  });
  auto g = testutil::gateway_for(backend, {"a", "b"});
  std::vector<PromptRecord> prompts;
  for (int i = 0; i < 5; ++i) prompts.push_back({"id" + std::to_string(i), "p" + std::to_string(i), {}});
  auto res = collect_pairs(*g, prompts, "a", "b", {}, 4);
  ASSERT_EQ(res.triplets.size(), 4u);
  ASSERT_EQ(res.failures.size(), 1u);
  EXPECT_EQ(res.failures[0].prompt_id, "id2");
  EXPECT_EQ(res.triplets[2].prompt_id, "id3");
  EXPECT_EQ(res.triplets[0].response_b, "B:p0");
  EXPECT_THROW(collect_pairs(*g, prompts, "a", "a", {}, 1), PreconditionError);
}

TEST(CollectPairs, ThrowsWhenEverythingFails) {
  auto backend = std::make_shared<MockBackend>();
  auto g = testutil::gateway_for(backend, {"a", "b"});
  EXPECT_THROW(collect_pairs(*g, {{"x", "y", {}}}, "a", "b", {}, 1), Error);
}

TEST(SplitCorpus, DisjointDeterministicAndOrderPreserving) {
  auto ts = make_triplets(300);
  auto s1 = split_corpus(ts, 100, 50, 7);
  auto s2 = split_corpus(ts, 100, 50, 7);
  EXPECT_EQ(s1.generation, s2.generation);
  EXPECT_EQ(s1.heldout, s2.heldout);
  ASSERT_EQ(s1.generation.size(), 100u);
  ASSERT_EQ(s1.heldout.size(), 50u);
  std::set<std::string> gen;
  for (const auto& t : s1.generation) gen.insert(t.prompt_id);
  for (const auto& t : s1.heldout) EXPECT_FALSE(gen.count(t.prompt_id));
  auto index = [](const std::string& id) { return std::stoi(id.substr(1)); };
  for (std::size_t i = 1; i < s1.generation.size(); ++i) {
    EXPECT_LT(index(s1.generation[i - 1].prompt_id), index(s1.generation[i].prompt_id));
  }
  EXPECT_NE(split_corpus(ts, 100, 50, 8).generation, s1.generation);
}

TEST(SplitCorpus, MembershipIgnoresInputOrder) {
  auto ts = make_triplets(120);
  auto shuffled = ts;
  std::mt19937 rng(3);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  auto ids = [](const std::vector<Triplet>& v) {
    std::set<std::string> s;
    for (const auto& t : v) s.insert(t.prompt_id);
    return s;
  };
  auto a = split_corpus(ts, 60, 30, 11);
  auto b = split_corpus(shuffled, 60, 30, 11);
  EXPECT_EQ(ids(a.generation), ids(b.generation));
  EXPECT_EQ(ids(a.heldout), ids(b.heldout));
}

TEST(SplitCorpus, RejectsTooFewOrDuplicates) {
  auto ts = make_triplets(10);
  try {
    split_corpus(ts, 8, 5, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "insufficient triplets: need 13, have 10");
  }
  ts.push_back(ts.front());
  EXPECT_THROW(split_corpus(ts, 2, 2, 0), Error);
}
