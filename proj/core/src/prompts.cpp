#include "modeldiff/prompts.hpp"

#include "modeldiff/common.hpp"

namespace modeldiff {
namespace detail {
const std::map<std::string, std::string, std::less<>>& builtin_prompt_table();
}

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size());
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    char c = tmpl[i];
    if (c == '{') {
      if (i + 1 < tmpl.size() && tmpl[i + 1] == '{') {
        out.push_back('{');
        ++i;
        continue;
      }
      auto close = tmpl.find('}', i + 1);
      if (close == std::string_view::npos) throw Error("unterminated placeholder in template");
      std::string name(tmpl.substr(i + 1, close - i - 1));
      auto it = values.find(name);
      if (it == values.end()) throw Error("template placeholder {" + name + "} has no value");
      out += it->second;
      i = close;
    } else if (c == '}') {
      if (i + 1 < tmpl.size() && tmpl[i + 1] == '}') ++i;
      out.push_back('}');
    } else {
      out.push_back(c);
    }
  }
  return out;
}

PromptLibrary::PromptLibrary() : templates_(detail::builtin_prompt_table()) {}

PromptLibrary::PromptLibrary(const std::filesystem::path& override_dir) : PromptLibrary() {
  if (!std::filesystem::is_directory(override_dir)) {
    throw Error("prompt directory not found: " + override_dir.string());
  }
  for (const auto& entry : std::filesystem::directory_iterator(override_dir)) {
    if (entry.path().extension() != ".txt") continue;
    std::string body = read_text(entry.path());
    if (!body.empty() && body.back() == '\n') body.pop_back();
    templates_[entry.path().stem().string()] = std::move(body);
  }
}

const std::string& PromptLibrary::get(std::string_view name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) throw Error("unknown prompt template '" + std::string(name) + "'");
  return it->second;
}

std::string PromptLibrary::render(std::string_view name, const std::map<std::string, std::string>& values) const {
  return render_template(get(name), values);
}

std::map<std::string, std::string> PromptLibrary::hashes() const {
  std::map<std::string, std::string> out;
  for (const auto& [name, body] : templates_) out[name] = sha256_hex(body);
  return out;
}

const PromptLibrary& default_prompts() {
  static const PromptLibrary lib;
  return lib;
}

}  // namespace modeldiff
