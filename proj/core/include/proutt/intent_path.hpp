#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace proutt {

/// One root-to-leaf route through an intent tree: topic, optional attribute,
/// optional attribute value, plus the turn that introduced the deepest node.
struct IntentPath {
  std::string topic;
  std::optional<std::string> attribute;
  std::optional<std::string> value;
  int turn_introduced = 1;

  friend bool operator==(const IntentPath&, const IntentPath&) = default;
};

/// Paths newly introduced at each turn (1-based turn index -> paths).
using PerTurnPaths = std::map<int, std::vector<IntentPath>>;

enum class Perspective { exploitation, exploration };

std::string_view to_string(Perspective p);
Perspective perspective_from_string(std::string_view s);

/// "Topic", "Topic → Attr" or "Topic → Attr - Value".
std::string render_path(const IntentPath& path);

/// Inverse of render_path. Accepts "->" for the arrow and ':' as an
/// alternative value separator. Throws ParseError("unparseable-path").
IntentPath parse_path(std::string_view text);

/// Rendered form after normalization; two paths with equal keys are the same
/// intent regardless of case or spacing.
std::string path_key(const IntentPath& path);

void to_json(nlohmann::json& j, const IntentPath& p);
void from_json(const nlohmann::json& j, IntentPath& p);

}  // namespace proutt
