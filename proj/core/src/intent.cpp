#include "proutt/intent.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "proutt/error.hpp"
#include "proutt/gateway.hpp"
#include "proutt/promptkit.hpp"
#include "proutt/text.hpp"

namespace proutt {

using nlohmann::json;

int IntentTree::max_turn() const {
  int m = 0;
  for (const auto& t : topics) {
    m = std::max(m, t.turn_introduced);
    for (const auto& c : t.children) m = std::max(m, c.turn_introduced);
  }
  return m;
}

bool IntentTree::has_topic(std::string_view label) const {
  const std::string key = text::normalize(label);
  return std::any_of(topics.begin(), topics.end(),
                     [&](const IntentNode& t) { return text::normalize(t.label) == key; });
}

// ---------------------------------------------------------------------------
// Tree grammar
// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kMaxLabelLength = 80;

[[noreturn]] void fail(const char* kind, const std::string& msg) { throw ParseError(kind, msg); }

bool is_blank(char c) { return c == ' ' || c == '\t' || c == '\r'; }

// Reads a candidate attribute label starting at `i` and reports whether it is
// followed by ':' or '{'. Used to decide whether a comma separates attributes.
bool looks_like_attribute_start(std::string_view s, std::size_t i) {
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  const std::size_t start = i;
  while (i < s.size()) {
    const char c = s[i];
    if (c == '\\') {
      i += 2;
      continue;
    }
    if (c == ':' || c == '{' || c == ',' || c == '}' || c == '\n') break;
    ++i;
  }
  if (i >= s.size() || (s[i] != ':' && s[i] != '{')) return false;
  const std::string label = text::trim(s.substr(start, i - start));
  return !label.empty() && label.size() <= kMaxLabelLength;
}

// Comma at `i` ends a line (only blanks before the next newline or end).
bool comma_ends_line(std::string_view s, std::size_t i) {
  ++i;
  while (i < s.size() && is_blank(s[i])) ++i;
  return i >= s.size() || s[i] == '\n';
}

std::string unescape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      ++i;
      out.push_back(s[i] == 'n' ? '\n' : s[i]);
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

// Splits "Label@3" into its unescaped label and optional turn tag.
std::pair<std::string, std::optional<int>> split_tag(std::string_view raw) {
  std::string t = text::trim(raw);
  if (t.find('\n') != std::string::npos)
    fail("syntax", "label spans several lines: '" + t.substr(0, 60) + "'");
  std::optional<int> turn;
  // Find the last '@' that is not escaped.
  std::optional<std::size_t> at;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] == '\\') {
      ++i;
      continue;
    }
    if (t[i] == '@') at = i;
  }
  if (at) {
    const std::string digits = text::trim(std::string_view(t).substr(*at + 1));
    if (!digits.empty() && std::all_of(digits.begin(), digits.end(),
                                       [](unsigned char c) { return std::isdigit(c) != 0; })) {
      if (digits.size() > 6) fail("syntax", "turn tag too large: @" + digits);
      const int k = std::stoi(digits);
      if (k < 1) fail("syntax", "turn tag must be >= 1: @" + digits);
      turn = k;
      t = text::trim(std::string_view(t).substr(0, *at));
    }
  }
  return {unescape(t), turn};
}

struct RawNode {
  std::string label;
  std::optional<std::string> value;
  std::optional<int> turn;
  std::vector<RawNode> children;
  bool group = false;
};

// Scans from `i` (just past '{') to the matching '}' and returns the raw
// attribute segments. `i` ends just past the closing brace.
std::vector<std::string> split_body(std::string_view s, std::size_t& i) {
  std::vector<std::string> segments;
  std::string current;
  int depth = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (c == '\\' && i + 1 < s.size()) {
      current.push_back(c);
      current.push_back(s[i + 1]);
      i += 2;
      continue;
    }
    if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (depth == 0) {
        ++i;
        segments.push_back(std::move(current));
        return segments;
      }
      --depth;
    } else if (c == ',' && depth == 0 &&
               (comma_ends_line(s, i) || looks_like_attribute_start(s, i + 1))) {
      segments.push_back(std::move(current));
      current.clear();
      ++i;
      continue;
    }
    current.push_back(c);
    ++i;
  }
  fail("unbalanced-brace", "missing '}' before end of tree text");
}

RawNode parse_segment(std::string_view seg);

std::vector<RawNode> parse_segments(const std::vector<std::string>& segments) {
  std::vector<RawNode> out;
  for (const auto& s : segments) {
    if (text::trim(s).empty()) continue;
    out.push_back(parse_segment(s));
  }
  return out;
}

RawNode parse_segment(std::string_view seg) {
  // First unescaped ':' or '{'.
  std::size_t i = 0;
  for (; i < seg.size(); ++i) {
    if (seg[i] == '\\') {
      ++i;
      continue;
    }
    if (seg[i] == ':' || seg[i] == '{') break;
    if (seg[i] == '}') fail("unbalanced-brace", "unexpected '}' in '" + std::string(seg) + "'");
  }
  RawNode node;
  auto [label, turn] = split_tag(seg.substr(0, std::min(i, seg.size())));
  node.label = std::move(label);
  node.turn = turn;
  if (node.label.empty()) fail("empty-label", "attribute with empty label in '" + text::trim(seg) + "'");
  if (i >= seg.size()) return node;

  if (seg[i] == ':') {
    std::string value = unescape(text::trim(seg.substr(i + 1)));
    if (!value.empty()) node.value = std::move(value);
    return node;
  }
  // Nested group.
  std::size_t j = i + 1;
  auto inner = split_body(seg, j);
  if (!text::trim(seg.substr(j)).empty())
    fail("syntax", "unexpected text after nested group '" + node.label + "'");
  node.group = true;
  node.children = parse_segments(inner);
  return node;
}

void flatten(const RawNode& node, const std::string& prefix, int inherited_turn,
             std::vector<IntentNode>& out) {
  const std::string label = prefix.empty() ? node.label : prefix + "." + node.label;
  const int turn = node.turn.value_or(inherited_turn);
  if (!node.group) {
    out.push_back({label, node.value, turn, {}});
    return;
  }
  if (node.children.empty()) {
    out.push_back({label, std::nullopt, turn, {}});
    return;
  }
  for (const auto& c : node.children) flatten(c, label, turn, out);
}

// Characters that always need escaping in labels.
bool label_special(char c) {
  return c == '\\' || c == '{' || c == '}' || c == ',' || c == ':' || c == '@';
}

std::string escape_label(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '\n') {
      out += "\\n";
    } else {
      if (label_special(c)) out.push_back('\\');
      out.push_back(c);
    }
  }
  return out;
}

// Built right to left so that each comma is tested against the escaped text
// that will actually follow it.
std::string escape_value(std::string_view s) {
  std::string suffix = "\n";
  for (std::size_t i = s.size(); i-- > 0;) {
    const char c = s[i];
    std::string piece;
    if (c == '\n') {
      piece = "\\n";
    } else if (c == '\\' || c == '{' || c == '}') {
      piece = {'\\', c};
    } else if (c == ',') {
      const std::string probe = "," + suffix;
      const bool esc = comma_ends_line(probe, 0) || looks_like_attribute_start(probe, 1);
      piece = esc ? "\\," : ",";
    } else {
      piece = std::string(1, c);
    }
    suffix.insert(0, piece);
  }
  suffix.pop_back();
  return suffix;
}

std::string tag(int turn, bool include) { return include ? "@" + std::to_string(turn) : ""; }

}  // namespace

IntentTree parse_tree_text(std::string_view s) {
  IntentTree tree;
  std::set<std::string> seen;
  std::size_t i = 0;
  while (true) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i >= s.size()) break;
    const std::size_t start = i;
    while (i < s.size() && s[i] != '{') {
      if (s[i] == '\\') ++i;
      else if (s[i] == '}') fail("unbalanced-brace", "unexpected '}' outside a topic");
      ++i;
    }
    if (i >= s.size())
      fail("syntax", "expected '{' after topic '" + text::trim(s.substr(start)) + "'");
    auto [label, turn] = split_tag(s.substr(start, i - start));
    if (label.empty()) fail("empty-label", "topic with empty label");
    ++i;
    auto segments = split_body(s, i);
    auto raw_children = parse_segments(segments);

    IntentNode topic{label, std::nullopt, turn.value_or(1), {}};
    for (const auto& c : raw_children) flatten(c, "", topic.turn_introduced, topic.children);

    const std::string key = text::normalize(topic.label);
    if (!seen.insert(key).second) fail("duplicate-topic", "duplicate topic '" + topic.label + "'");
    tree.topics.push_back(std::move(topic));
  }
  return tree;
}

std::string render_tree(const IntentTree& tree, bool include_turn_tags) {
  std::string out;
  for (const auto& topic : tree.topics) {
    out += escape_label(topic.label) + tag(topic.turn_introduced, include_turn_tags);
    if (topic.children.empty()) {
      out += " { }\n";
      continue;
    }
    out += " {\n";
    for (std::size_t i = 0; i < topic.children.size(); ++i) {
      const auto& a = topic.children[i];
      out += "    " + escape_label(a.label) + tag(a.turn_introduced, include_turn_tags);
      if (a.value) out += ": " + escape_value(*a.value);
      out += i + 1 < topic.children.size() ? ",\n" : "\n";
    }
    out += "}\n";
  }
  return out;
}

void validate_tree(const IntentTree& tree, int max_turn) {
  std::set<std::string> seen;
  auto check_turn = [&](const IntentNode& n) {
    if (n.turn_introduced < 1 || (max_turn > 0 && n.turn_introduced > max_turn))
      fail("turn-out-of-range", "node '" + n.label + "' has turn " +
                                    std::to_string(n.turn_introduced) + " outside [1, " +
                                    std::to_string(max_turn) + "]");
  };
  for (const auto& t : tree.topics) {
    if (text::trim(t.label).empty()) fail("empty-label", "topic with empty label");
    if (!seen.insert(text::normalize(t.label)).second)
      fail("duplicate-topic", "duplicate topic '" + t.label + "'");
    check_turn(t);
    for (const auto& c : t.children) {
      if (text::trim(c.label).empty()) fail("empty-label", "attribute with empty label");
      if (!c.children.empty()) fail("depth", "attribute '" + c.label + "' has children");
      check_turn(c);
    }
  }
}

PerTurnPaths extract_new_paths(const IntentTree& tree) {
  PerTurnPaths out;
  for (const auto& t : tree.topics) {
    if (t.children.empty()) {
      out[t.turn_introduced].push_back({t.label, std::nullopt, std::nullopt, t.turn_introduced});
      continue;
    }
    for (const auto& a : t.children)
      out[a.turn_introduced].push_back({t.label, a.label, a.value, a.turn_introduced});
  }
  return out;
}

IntentTree prefix_tree(const IntentTree& tree, int k) {
  if (k < 1) throw UsageError("out-of-range", "prefix_tree requires k >= 1");
  IntentTree out;
  for (const auto& t : tree.topics) {
    IntentNode topic{t.label, t.value, t.turn_introduced, {}};
    for (const auto& a : t.children)
      if (a.turn_introduced <= k) topic.children.push_back(a);
    if (t.turn_introduced <= k || !topic.children.empty()) out.topics.push_back(std::move(topic));
  }
  return out;
}

double path_similarity(const IntentPath& a, const IntentPath& b, llm::Embedder& embedder) {
  const std::string ra = render_path(a);
  const std::string rb = render_path(b);
  if (text::normalize(ra) == text::normalize(rb)) return 1.0;
  const auto vecs = embedder.embed({ra, rb});
  const double c = llm::cosine(vecs.at(0), vecs.at(1));
  return std::clamp(c, 0.0, 1.0);
}

double path_set_similarity(const std::vector<IntentPath>& a, const std::vector<IntentPath>& b,
                           llm::Embedder& embedder) {
  double best = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) best = std::max(best, path_similarity(x, y, embedder));
  return best;
}

// ---------------------------------------------------------------------------
// LLM-backed construction
// ---------------------------------------------------------------------------

IntentTree parse_tree_response(std::string_view response) {
  std::string body(response);
  constexpr std::string_view kMarker = "[User Intent Tree]:";
  if (auto pos = body.find(kMarker); pos != std::string::npos) body = body.substr(pos + kMarker.size());
  if (auto fence = body.find("```"); fence != std::string::npos) {
    auto line_end = body.find('\n', fence);
    auto close = line_end == std::string::npos ? std::string::npos : body.find("```", line_end);
    if (close != std::string::npos) body = body.substr(line_end + 1, close - line_end - 1);
  }
  // Drop trailing prose after the last closing brace.
  if (auto last = body.rfind('}'); last != std::string::npos) body.resize(last + 1);
  IntentTree tree = parse_tree_text(body);
  if (tree.empty()) throw ParseError("syntax", "response contains no intent tree");
  return tree;
}

IntentTree build_intent_tree(const Dialogue& dialogue, llm::Gateway& gateway,
                             const PromptRegistry& registry, const llm::ModelParams& params) {
  if (dialogue.turns.empty()) throw UsageError("precondition", "dialogue has no turns");
  const int n = dialogue.turn_count();
  const PromptVars vars{{"dialogue", render_context(dialogue.turns)},
                        {"turn_count", std::to_string(n)}};
  auto request = params.request(registry.render(TemplateId::tree_build, InstructionStyle::structured, vars),
                                "tree_build");
  auto response = gateway.chat(request);
  try {
    IntentTree tree = parse_tree_response(response.content);
    validate_tree(tree, n);
    return tree;
  } catch (const ParseError& first) {
    PromptVars repair = vars;
    repair["previous_output"] = response.content;
    repair["error"] = first.what();
    auto retry = params.request(
        registry.render(TemplateId::tree_repair, InstructionStyle::structured, repair), "tree_repair");
    auto second = gateway.chat(retry);
    try {
      IntentTree tree = parse_tree_response(second.content);
      validate_tree(tree, n);
      return tree;
    } catch (const ParseError& e) {
      throw Error("unparseable-after-retry",
                  "intent tree for " + dialogue.id + " unparseable after repair: " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

void to_json(json& j, const IntentTree& t) {
  json topics = json::array();
  for (const auto& topic : t.topics) {
    json children = json::array();
    for (const auto& a : topic.children) {
      children.push_back({{"label", a.label},
                          {"value", a.value ? json(*a.value) : json()},
                          {"turn", a.turn_introduced}});
    }
    topics.push_back({{"label", topic.label},
                      {"value", topic.value ? json(*topic.value) : json()},
                      {"turn", topic.turn_introduced},
                      {"children", std::move(children)}});
  }
  j = json{{"topics", std::move(topics)}};
}

void from_json(const json& j, IntentTree& t) {
  t.topics.clear();
  for (const auto& jt : j.at("topics")) {
    IntentNode topic;
    topic.label = jt.at("label").get<std::string>();
    if (jt.contains("value") && !jt["value"].is_null()) topic.value = jt["value"].get<std::string>();
    topic.turn_introduced = jt.at("turn").get<int>();
    if (jt.contains("children")) {
      for (const auto& jc : jt["children"]) {
        IntentNode a;
        a.label = jc.at("label").get<std::string>();
        if (jc.contains("value") && !jc["value"].is_null()) a.value = jc["value"].get<std::string>();
        a.turn_introduced = jc.at("turn").get<int>();
        topic.children.push_back(std::move(a));
      }
    }
    t.topics.push_back(std::move(topic));
  }
  validate_tree(t);
}

}  // namespace proutt
