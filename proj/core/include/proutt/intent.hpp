#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "proutt/corpus.hpp"
#include "proutt/intent_path.hpp"

namespace proutt {

namespace llm {
class Gateway;
class Embedder;
struct ModelParams;
}  // namespace llm

class PromptRegistry;

/// Topic (depth 1) or attribute (depth 2) node of a user intent tree.
struct IntentNode {
  std::string label;
  std::optional<std::string> value;
  int turn_introduced = 1;
  std::vector<IntentNode> children;

  friend bool operator==(const IntentNode&, const IntentNode&) = default;
};

/// Two-level topic -> attribute tree with per-node turn provenance.
struct IntentTree {
  std::vector<IntentNode> topics;

  bool empty() const { return topics.empty(); }
  /// Highest turn_introduced over all nodes, 0 for an empty tree.
  int max_turn() const;
  /// True when a topic with this label (normalized) exists.
  bool has_topic(std::string_view label) const;

  friend bool operator==(const IntentTree&, const IntentTree&) = default;
};

/// Parses the textual tree grammar:
///
///   tree   := (topic)*
///   topic  := label tag? '{' (attr (',' attr)* ','?)? '}'
///   attr   := label tag? (':' value)? | label tag? '{' attr* '}'
///   tag    := '@' digits
///
/// Attribute separators are commas that end a line or are followed by another
/// `label:` / `label {`. Nested groups deeper than attributes are flattened to
/// dotted attribute labels. Backslash escapes any of `\ { } , : @` and `\n`
/// stands for a newline. Untagged nodes inherit their parent's turn (topics
/// default to 1).
///
/// Throws ParseError with kind "unbalanced-brace", "empty-label",
/// "duplicate-topic" or "syntax".
IntentTree parse_tree_text(std::string_view text);

/// Multi-line rendering; parse_tree_text(render_tree(t, true)) == t.
std::string render_tree(const IntentTree& tree, bool include_turn_tags);

/// Throws ParseError when labels are empty, topics repeat, depth exceeds two,
/// or a turn lies outside [1, max_turn] (max_turn <= 0 disables that check).
void validate_tree(const IntentTree& tree, int max_turn = 0);

/// Paths introduced at each turn: one per attribute and one per childless
/// topic, keyed by the deepest node's turn.
PerTurnPaths extract_new_paths(const IntentTree& tree);

/// Nodes introduced at or before turn k; a topic is kept whenever one of its
/// attributes is.
IntentTree prefix_tree(const IntentTree& tree, int k);

/// 1.0 for equal normalized renderings, otherwise the clamped cosine of the
/// embedded renderings.
double path_similarity(const IntentPath& a, const IntentPath& b, llm::Embedder& embedder);

/// Largest pairwise similarity between two path sets.
double path_set_similarity(const std::vector<IntentPath>& a, const std::vector<IntentPath>& b,
                           llm::Embedder& embedder);

/// Asks the model for a turn-tagged intent tree of the whole dialogue. A
/// response that fails to parse gets one repair round; a second failure throws
/// Error("unparseable-after-retry").
IntentTree build_intent_tree(const Dialogue& dialogue, llm::Gateway& gateway,
                             const PromptRegistry& registry, const llm::ModelParams& params);

/// Extracts the tree block from a model response (after a "[User Intent Tree]:"
/// marker or inside a code fence when present) and parses it.
IntentTree parse_tree_response(std::string_view response);

void to_json(nlohmann::json& j, const IntentTree& t);
void from_json(const nlohmann::json& j, IntentTree& t);

}  // namespace proutt
