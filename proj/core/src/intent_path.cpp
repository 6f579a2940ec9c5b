#include "proutt/intent_path.hpp"

#include "proutt/error.hpp"
#include "proutt/text.hpp"

namespace proutt {

namespace {
constexpr std::string_view kArrow = "\xE2\x86\x92";  // U+2192
constexpr std::size_t kMaxPathLength = 300;

[[noreturn]] void bad_path(std::string_view text, const std::string& why) {
  throw ParseError("unparseable-path", "cannot parse intent path '" + std::string(text) + "': " + why);
}
}  // namespace

std::string_view to_string(Perspective p) {
  return p == Perspective::exploitation ? "exploitation" : "exploration";
}

Perspective perspective_from_string(std::string_view s) {
  if (s == "exploitation") return Perspective::exploitation;
  if (s == "exploration") return Perspective::exploration;
  throw ParseError("bad-enum", "unknown perspective '" + std::string(s) + "'");
}

std::string render_path(const IntentPath& path) {
  std::string out = path.topic;
  if (path.attribute) {
    out += " ";
    out += kArrow;
    out += " " + *path.attribute;
    if (path.value) out += " - " + *path.value;
  }
  return out;
}

IntentPath parse_path(std::string_view raw) {
  const std::string t = text::trim(raw);
  if (t.empty()) bad_path(raw, "empty");
  if (t.size() > kMaxPathLength) bad_path(raw, "too long");
  for (std::size_t i = 0; i < t.size(); ++i) {
    const char c = t[i];
    const bool ascii_arrow = c == '>' && i > 0 && t[i - 1] == '-';
    if (c == '\n' || c == '<' || (c == '>' && !ascii_arrow) || c == '`') bad_path(raw, "illegal character");
  }

  IntentPath p;
  std::size_t arrow = t.find(kArrow);
  std::size_t arrow_len = kArrow.size();
  if (arrow == std::string::npos) {
    arrow = t.find("->");
    arrow_len = 2;
  }
  if (arrow == std::string::npos) {
    p.topic = t;
    return p;
  }
  p.topic = text::trim(std::string_view(t).substr(0, arrow));
  if (p.topic.empty()) bad_path(raw, "empty topic");

  const std::string rest = text::trim(std::string_view(t).substr(arrow + arrow_len));
  if (rest.find(kArrow) != std::string::npos || rest.find("->") != std::string::npos)
    bad_path(raw, "more than one arrow");
  const std::size_t dash = rest.find(" - ");
  const std::size_t colon = rest.find(':');
  std::size_t sep = std::string::npos;
  std::size_t sep_len = 0;
  if (dash != std::string::npos && (colon == std::string::npos || dash < colon)) {
    sep = dash;
    sep_len = 3;
  } else if (colon != std::string::npos) {
    sep = colon;
    sep_len = 1;
  }
  std::string attribute = sep == std::string::npos ? rest : text::trim(rest.substr(0, sep));
  // "Attr -" with nothing after the dash.
  if (sep == std::string::npos && attribute.size() >= 2 &&
      attribute.compare(attribute.size() - 2, 2, " -") == 0)
    bad_path(raw, "empty value");
  if (attribute.empty() || attribute == "-") bad_path(raw, "empty attribute");
  p.attribute = attribute;
  if (sep != std::string::npos) {
    std::string value = text::trim(rest.substr(sep + sep_len));
    if (value.empty()) bad_path(raw, "empty value");
    p.value = value;
  }
  return p;
}

std::string path_key(const IntentPath& path) { return text::normalize(render_path(path)); }

void to_json(nlohmann::json& j, const IntentPath& p) {
  j = nlohmann::json{{"topic", p.topic},
                     {"attribute", p.attribute ? nlohmann::json(*p.attribute) : nlohmann::json()},
                     {"value", p.value ? nlohmann::json(*p.value) : nlohmann::json()},
                     {"turn", p.turn_introduced}};
}

void from_json(const nlohmann::json& j, IntentPath& p) {
  p.topic = j.at("topic").get<std::string>();
  p.attribute.reset();
  p.value.reset();
  if (j.contains("attribute") && !j["attribute"].is_null()) p.attribute = j["attribute"].get<std::string>();
  if (j.contains("value") && !j["value"].is_null()) p.value = j["value"].get<std::string>();
  p.turn_introduced = j.value("turn", 1);
  if (p.topic.empty()) throw ParseError("schema-violation", "intent path with empty topic");
  if (p.value && !p.attribute) throw ParseError("schema-violation", "intent path value without attribute");
}

}  // namespace proutt
