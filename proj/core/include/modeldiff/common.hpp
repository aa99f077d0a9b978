#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace modeldiff {

using json = nlohmann::json;

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An LLM (or file) produced text that does not follow the expected grammar.
/// The offending text is kept so callers can log or audit it.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw)
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

/// Caller violated an operation's precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Which of the two compared models a claim or response refers to.
enum class Side { A, B };

inline char side_char(Side s) { return s == Side::A ? 'A' : 'B'; }
inline Side other(Side s) { return s == Side::A ? Side::B : Side::A; }
Side parse_side(std::string_view text);

enum class Method { Llm, Sae, Kl };

std::string_view method_name(Method m);
Method parse_method(std::string_view text);

/// A directional claim "Model <direction> does <text> more".
/// `text` is direction-free; the direction is carried separately so the
/// judge never sees which model the claim is expected to favour.
struct Hypothesis {
  std::string id;
  std::string text;
  Side direction = Side::A;
  Method method = Method::Llm;
  std::size_t support = 0;
  double majority_fraction = 1.0;

  friend bool operator==(const Hypothesis&, const Hypothesis&) = default;
};

void to_json(json& j, const Hypothesis& h);
void from_json(const json& j, Hypothesis& h);

/// Minimal value-or-error holder used where per-item failures must not abort
/// a batch.
template <typename T>
class Outcome {
 public:
  static Outcome success(T value) {
    Outcome o;
    o.value_ = std::move(value);
    return o;
  }
  static Outcome failure(std::string message) {
    Outcome o;
    o.error_ = std::move(message);
    return o;
  }

  bool ok() const noexcept { return value_.has_value(); }
  explicit operator bool() const noexcept { return ok(); }
  const T& value() const& {
    if (!value_) throw Error(error_);
    return *value_;
  }
  T&& value() && {
    if (!value_) throw Error(error_);
    return std::move(*value_);
  }
  const std::string& error() const noexcept { return error_; }

 private:
  std::optional<T> value_;
  std::string error_;
};

// ---- text helpers ---------------------------------------------------------

std::string sha256_hex(std::string_view data);
std::string trim(std::string_view s);
std::vector<std::string> split_whitespace(std::string_view s);
std::size_t count_tokens(std::string_view s);

/// "llm", 7 -> "llm-007".
std::string make_id(std::string_view prefix, std::size_t index);

/// Strips a single surrounding ```...``` fence if present. Used only where a
/// grammar explicitly tolerates fences (never for the judge).
std::string strip_code_fence(std::string_view s);

// ---- line-delimited JSON --------------------------------------------------

std::vector<json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

template <typename T>
std::vector<T> read_jsonl_as(const std::filesystem::path& path) {
  std::vector<T> out;
  for (const auto& row : read_jsonl(path)) out.push_back(row.get<T>());
  return out;
}

template <typename T>
void write_jsonl_from(const std::filesystem::path& path, const std::vector<T>& items) {
  std::vector<json> rows;
  rows.reserve(items.size());
  for (const auto& item : items) rows.emplace_back(item);
  write_jsonl(path, rows);
}

}  // namespace modeldiff
