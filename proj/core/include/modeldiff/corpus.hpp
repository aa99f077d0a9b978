#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modeldiff/common.hpp"
#include "modeldiff/gateway.hpp"

namespace modeldiff {

struct PromptRecord {
  std::string id;
  std::string text;
  std::map<std::string, std::string> meta;
};

/// One prompt with the paired responses of the two compared models.
struct Triplet {
  std::string prompt_id;
  std::string prompt;
  std::string response_a;
  std::string response_b;
  std::string model_a;
  std::string model_b;

  const std::string& response(Side s) const { return s == Side::A ? response_a : response_b; }
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

struct CorpusSplit {
  std::vector<Triplet> generation;
  std::vector<Triplet> heldout;
  std::uint64_t seed = 0;
};

void to_json(json& j, const PromptRecord& p);
void from_json(const json& j, PromptRecord& p);
void to_json(json& j, const Triplet& t);
void from_json(const json& j, Triplet& t);

/// Reads a line-delimited prompts file. Blank lines are skipped. Errors name
/// the 1-based line number ("line 7: missing field text") or the duplicate id.
std::vector<PromptRecord> load_prompts(const std::filesystem::path& path,
                                       std::optional<std::size_t> limit = std::nullopt);

struct CollectionFailure {
  std::string prompt_id;
  std::string error;
};

struct CollectionResult {
  std::vector<Triplet> triplets;
  std::vector<CollectionFailure> failures;
};

/// Queries both models once per prompt. Prompts whose calls fail after the
/// gateway's retries are skipped and reported; output keeps input order.
/// Throws when every prompt fails.
CollectionResult collect_pairs(Gateway& gateway, const std::vector<PromptRecord>& prompts,
                               const std::string& model_a, const std::string& model_b,
                               const GenerationConfig& gen, std::size_t parallelism);

/// Deterministic disjoint split. Membership depends only on the prompt ids,
/// the requested sizes, and the seed; each side keeps input order.
CorpusSplit split_corpus(const std::vector<Triplet>& triplets, std::size_t n_generation,
                         std::size_t n_heldout, std::uint64_t seed);

}  // namespace modeldiff
