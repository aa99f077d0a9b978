#include "modeldiff/common.hpp"

#include <array>
#include <cstdio>
#include <cctype>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

namespace modeldiff {

Side parse_side(std::string_view text) {
  if (text == "A" || text == "a") return Side::A;
  if (text == "B" || text == "b") return Side::B;
  throw Error("invalid model side '" + std::string(text) + "' (expected A or B)");
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::Llm: return "llm";
    case Method::Sae: return "sae";
    case Method::Kl: return "kl";
  }
  return "?";
}

Method parse_method(std::string_view text) {
  if (text == "llm") return Method::Llm;
  if (text == "sae") return Method::Sae;
  if (text == "kl") return Method::Kl;
  throw Error("invalid method '" + std::string(text) + "'");
}

void to_json(json& j, const Hypothesis& h) {
  j = json{{"id", h.id},
           {"text", h.text},
           {"direction", std::string(1, side_char(h.direction))},
           {"method", method_name(h.method)},
           {"support", h.support},
           {"majority_fraction", h.majority_fraction}};
}

void from_json(const json& j, Hypothesis& h) {
  h.id = j.at("id").get<std::string>();
  h.text = j.at("text").get<std::string>();
  h.direction = parse_side(j.at("direction").get<std::string>());
  h.method = parse_method(j.at("method").get<std::string>());
  h.support = j.at("support").get<std::size_t>();
  h.majority_fraction = j.at("majority_fraction").get<double>();
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t start = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > start) out.emplace_back(s.substr(start, i - start));
  }
  return out;
}

std::size_t count_tokens(std::string_view s) {
  std::size_t n = 0;
  bool in_token = false;
  for (char c : s) {
    bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_token) ++n;
    in_token = !space;
  }
  return n;
}

std::string make_id(std::string_view prefix, std::size_t index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*s-%03zu", static_cast<int>(prefix.size()), prefix.data(), index);
  return buf;
}

std::string strip_code_fence(std::string_view s) {
  std::string t = trim(s);
  if (t.rfind("```", 0) != 0) return t;
  auto first_nl = t.find('\n');
  auto last = t.rfind("```");
  if (first_nl == std::string::npos || last == std::string::npos || last <= first_nl) return t;
  return trim(std::string_view(t).substr(first_nl + 1, last - first_nl - 1));
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw Error(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows) {
  std::string buf;
  for (const auto& row : rows) {
    buf += row.dump();
    buf += '\n';
  }
  write_text(path, buf);
}

}  // namespace modeldiff
