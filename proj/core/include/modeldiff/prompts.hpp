#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace modeldiff {

/// Placeholder that replaces "Model A"/"Model B" in normalized differences.
inline constexpr std::string_view kModelPlaceholder = "⟨MODEL⟩";

/// Fills `{name}` placeholders from `values`. `{{` and `}}` render as literal
/// braces. Substituted values are not rescanned. Unknown or unterminated
/// placeholders throw.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values);

/// The set of prompt templates used by every LLM-backed stage. Built-in
/// templates ship with the library; a directory of `<name>.txt` files can
/// override any of them.
class PromptLibrary {
 public:
  PromptLibrary();
  explicit PromptLibrary(const std::filesystem::path& override_dir);

  const std::string& get(std::string_view name) const;
  std::string render(std::string_view name, const std::map<std::string, std::string>& values) const;

  /// name -> sha256 of the template text, recorded in run manifests.
  std::map<std::string, std::string> hashes() const;

 private:
  std::map<std::string, std::string, std::less<>> templates_;
};

/// Shared default instance holding the built-in templates.
const PromptLibrary& default_prompts();

}  // namespace modeldiff
