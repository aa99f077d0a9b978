#pragma once

#include <optional>
#include <string>

#include "modeldiff/gateway.hpp"

namespace modeldiff {

/// Appended to the user turn when a reply has to be requested again.
inline constexpr std::string_view kRepromptSuffix =
    "\n\nYour previous reply did not follow the required output format. Reply again using exactly the "
    "required format and nothing else.";

/// Sends one request and parses the reply with `parse`, which throws
/// ParseError on grammar violations. On failure the request is repeated once
/// with kRepromptSuffix appended; a second failure propagates the ParseError of
/// the second reply.
template <typename Parse>
auto ask_parsed(Gateway& gateway, const std::string& model, const std::optional<std::string>& system,
                const std::string& user, const GenerationConfig& gen, Parse&& parse) {
  try {
    return parse(gateway.complete_text(model, system, user, gen));
  } catch (const ParseError&) {
    return parse(gateway.complete_text(model, system, user + std::string(kRepromptSuffix), gen));
  }
}

}  // namespace modeldiff
