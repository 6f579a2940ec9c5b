#include "proutt/promptkit.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "proutt/error.hpp"
#include "proutt/text.hpp"

namespace proutt {

namespace detail {
// Generated from core/templates at configure time.
const std::map<std::string, std::string>& embedded_template_files();
}  // namespace detail

// ---------------------------------------------------------------------------
// Enums
// ---------------------------------------------------------------------------

std::string_view to_string(SentenceType t) {
  switch (t) {
    case SentenceType::declarative: return "declarative";
    case SentenceType::imperative: return "imperative";
    case SentenceType::interrogative: return "interrogative";
  }
  return "declarative";
}

SentenceType sentence_type_from_string(std::string_view s) {
  for (auto t : kSentenceTypes)
    if (to_string(t) == s) return t;
  throw ParseError("bad-enum", "unknown sentence type '" + std::string(s) + "'");
}

std::string_view analysis_label(SentenceType t) {
  switch (t) {
    case SentenceType::declarative: return "Statement";
    case SentenceType::imperative: return "Instruction";
    case SentenceType::interrogative: return "Question";
  }
  return "Statement";
}

namespace {
constexpr std::pair<TemplateId, std::string_view> kTemplateNames[] = {
    {TemplateId::tree_build, "tree_build"},
    {TemplateId::tree_repair, "tree_repair"},
    {TemplateId::sentence_type_declarative, "sentence_type.declarative"},
    {TemplateId::sentence_type_imperative, "sentence_type.imperative"},
    {TemplateId::sentence_type_interrogative, "sentence_type.interrogative"},
    {TemplateId::path_reason_exploit, "path_reason.exploit"},
    {TemplateId::path_reason_explore, "path_reason.explore"},
    {TemplateId::verbalize, "verbalize"},
    {TemplateId::verbalize_approx, "verbalize_approx"},
    {TemplateId::alternative_path, "alternative_path"},
    {TemplateId::judge_pointwise, "judge_pointwise"},
    {TemplateId::judge_pairwise, "judge_pairwise"},
};
static_assert(std::size(kTemplateNames) == kTemplateCount);
}  // namespace

std::string_view template_name(TemplateId id) {
  for (const auto& [k, v] : kTemplateNames)
    if (k == id) return v;
  return "unknown";
}

TemplateId template_id_from_string(std::string_view name) {
  for (const auto& [k, v] : kTemplateNames)
    if (v == name) return k;
  throw ParseError("unknown-template", "unknown template id '" + std::string(name) + "'");
}

std::vector<TemplateId> all_template_ids() {
  std::vector<TemplateId> out;
  for (const auto& [k, v] : kTemplateNames) out.push_back(k);
  return out;
}

TemplateId sentence_type_template(SentenceType t) {
  switch (t) {
    case SentenceType::declarative: return TemplateId::sentence_type_declarative;
    case SentenceType::imperative: return TemplateId::sentence_type_imperative;
    case SentenceType::interrogative: return TemplateId::sentence_type_interrogative;
  }
  return TemplateId::sentence_type_declarative;
}

TemplateId path_reason_template(Perspective p) {
  return p == Perspective::exploitation ? TemplateId::path_reason_exploit
                                        : TemplateId::path_reason_explore;
}

std::string_view to_string(InstructionStyle s) {
  return s == InstructionStyle::structured ? "structured" : "minimal";
}

InstructionStyle instruction_style_from_string(std::string_view s) {
  if (s == "structured") return InstructionStyle::structured;
  if (s == "minimal") return InstructionStyle::minimal;
  throw UsageError("bad-enum", "unknown instruction style '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Template expansion
// ---------------------------------------------------------------------------

namespace {

struct Tag {
  std::size_t begin;  // position of "{{"
  std::size_t end;    // one past "}}"
  char kind;          // 0 plain, '#', '^', '/'
  std::string name;
};

std::optional<Tag> next_tag(std::string_view s, std::size_t from) {
  const std::size_t open = s.find("{{", from);
  if (open == std::string_view::npos) return std::nullopt;
  const std::size_t close = s.find("}}", open + 2);
  if (close == std::string_view::npos)
    throw ParseError("template-syntax", "unterminated '{{' in template");
  Tag t{open, close + 2, 0, text::trim(s.substr(open + 2, close - open - 2))};
  if (!t.name.empty() && (t.name[0] == '#' || t.name[0] == '^' || t.name[0] == '/')) {
    t.kind = t.name[0];
    t.name = text::trim(std::string_view(t.name).substr(1));
  }
  if (t.name.empty()) throw ParseError("template-syntax", "empty placeholder in template");
  return t;
}

const std::string& lookup(const PromptVars& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end())
    throw UsageError("unbound-placeholder", "template variable '" + name + "' is not bound");
  return it->second;
}

// Expands s[from, until) and returns the output; stops at a closing tag for
// `section` when given.
std::string expand_range(std::string_view s, std::size_t& pos, const PromptVars& vars,
                         const std::string* section) {
  std::string out;
  while (true) {
    auto tag = next_tag(s, pos);
    if (!tag) {
      if (section) throw ParseError("template-syntax", "unclosed section '" + *section + "'");
      out.append(s.substr(pos));
      pos = s.size();
      return out;
    }
    out.append(s.substr(pos, tag->begin - pos));
    pos = tag->end;
    switch (tag->kind) {
      case 0: out += lookup(vars, tag->name); break;
      case '/':
        if (!section || *section != tag->name)
          throw ParseError("template-syntax", "unexpected closing tag '" + tag->name + "'");
        return out;
      case '#':
      case '^': {
        const bool present = !lookup(vars, tag->name).empty();
        std::string inner = expand_range(s, pos, vars, &tag->name);
        if (present == (tag->kind == '#')) out += inner;
        break;
      }
    }
  }
}

}  // namespace

std::string expand_template(std::string_view source, const PromptVars& vars) {
  std::size_t pos = 0;
  return expand_range(source, pos, vars, nullptr);
}

std::set<std::string> template_placeholders(std::string_view source) {
  std::set<std::string> out;
  std::size_t pos = 0;
  while (auto tag = next_tag(source, pos)) {
    if (tag->kind != '/') out.insert(tag->name);
    pos = tag->end;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

namespace {

std::vector<std::pair<llm::Role, std::string>> split_sections(std::string_view source,
                                                              std::string_view origin) {
  std::vector<std::pair<llm::Role, std::string>> out;
  std::istringstream in{std::string(source)};
  std::string line;
  std::optional<llm::Role> role;
  std::string body;
  auto flush = [&] {
    if (role) out.emplace_back(*role, text::trim(body));
    body.clear();
  };
  while (std::getline(in, line)) {
    if (line.rfind("### ", 0) == 0) {
      flush();
      role = llm::role_from_string(text::trim(std::string_view(line).substr(4)));
      continue;
    }
    if (!role) {
      if (!text::trim(line).empty())
        throw ParseError("template-syntax", std::string(origin) + ": text before the first section");
      continue;
    }
    body += line + "\n";
  }
  flush();
  if (out.empty()) throw ParseError("template-syntax", std::string(origin) + ": no sections");
  return out;
}

}  // namespace

PromptRegistry PromptRegistry::from_sources(std::string_view manifest_json,
                                            const std::map<std::string, std::string>& files) {
  PromptRegistry reg;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_json);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad-manifest", std::string("template manifest: ") + e.what());
  }
  for (const auto& entry : manifest.at("templates")) {
    PromptTemplate t;
    t.id = template_id_from_string(entry.at("id").get<std::string>());
    t.style = instruction_style_from_string(entry.at("style").get<std::string>());
    t.version = entry.at("version").get<std::string>();
    const std::string file = entry.at("file").get<std::string>();
    auto it = files.find(file);
    if (it == files.end()) throw ParseError("bad-manifest", "template file missing: " + file);
    t.source = it->second;
    split_sections(t.source, file);  // validate eagerly
    t.placeholders = template_placeholders(t.source);
    if (!reg.templates_.emplace(std::make_pair(t.id, t.style), std::move(t)).second)
      throw ParseError("bad-manifest", "duplicate template entry for " + file);
  }
  for (auto id : all_template_ids()) {
    for (auto style : {InstructionStyle::structured, InstructionStyle::minimal}) {
      if (!reg.templates_.count({id, style}))
        throw ParseError("bad-manifest", "template " + std::string(template_name(id)) + " has no " +
                                             std::string(to_string(style)) + " variant");
    }
  }
  return reg;
}

const PromptRegistry& PromptRegistry::builtin() {
  static const PromptRegistry reg = [] {
    const auto& files = detail::embedded_template_files();
    return from_sources(files.at("manifest.json"), files);
  }();
  return reg;
}

PromptRegistry PromptRegistry::load(const std::filesystem::path& manifest) {
  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw UsageError("io", "cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string manifest_text = read(manifest);
  std::map<std::string, std::string> files;
  const auto dir = manifest.parent_path();
  const auto parsed = nlohmann::json::parse(manifest_text);
  for (const auto& entry : parsed.at("templates")) {
    const auto file = entry.at("file").get<std::string>();
    files.emplace(file, read(dir / file));
  }
  return from_sources(manifest_text, files);
}

const PromptTemplate& PromptRegistry::get(TemplateId id, InstructionStyle style) const {
  return templates_.at({id, style});
}

std::vector<llm::ChatMessage> PromptRegistry::render(TemplateId id, InstructionStyle style,
                                                     const PromptVars& vars) const {
  const auto& t = get(id, style);
  std::vector<llm::ChatMessage> out;
  for (auto& [role, body] : split_sections(t.source, template_name(id)))
    out.push_back({role, text::trim(expand_template(body, vars))});
  return out;
}

std::map<std::string, std::string> PromptRegistry::versions() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, t] : templates_)
    out[std::string(template_name(key.first)) + "." + std::string(to_string(key.second))] = t.version;
  return out;
}

// ---------------------------------------------------------------------------
// Parsers
// ---------------------------------------------------------------------------

ParsedPathCandidates parse_path_candidates(std::string_view text, std::size_t expected_q) {
  ParsedPathCandidates out;
  out.reasoning_text = std::string(text);
  std::size_t pos = 0;
  while (true) {
    const std::size_t open = text.find(kPathOpen, pos);
    if (open == std::string_view::npos) break;
    const std::size_t inner = open + kPathOpen.size();
    const std::size_t close = text.find(kPathClose, inner);
    const std::size_t next_open = text.find(kPathOpen, inner);
    const std::size_t index = out.candidates.size();
    if (close == std::string_view::npos || (next_open != std::string_view::npos && next_open < close))
      throw ParseError("unparseable-path", "segment " + std::to_string(index) + " is not closed");
    CandidateSegment seg;
    try {
      seg.path = parse_path(text.substr(inner, close - inner));
    } catch (const ParseError& e) {
      throw ParseError("unparseable-path", "segment " + std::to_string(index) + ": " + e.what());
    }
    seg.begin = open;
    seg.end = close + kPathClose.size();
    out.candidates.push_back(std::move(seg));
    pos = close + kPathClose.size();
  }
  if (text.find(kPathClose, pos) != std::string_view::npos)
    throw ParseError("unparseable-path", "closing marker without an opening marker");
  if (out.candidates.size() != expected_q)
    throw ParseError("wrong-candidate-count", "expected " + std::to_string(expected_q) +
                                                  " delimited path(s), found " +
                                                  std::to_string(out.candidates.size()));
  return out;
}

void splice_candidate(std::string& reasoning_text, std::vector<CandidateSegment>& candidates,
                      std::size_t index, const IntentPath& replacement) {
  auto& seg = candidates.at(index);
  const std::string inner = render_path(replacement);
  const std::string piece = std::string(kPathOpen) + inner + std::string(kPathClose);
  const std::ptrdiff_t delta =
      static_cast<std::ptrdiff_t>(piece.size()) - static_cast<std::ptrdiff_t>(seg.end - seg.begin);
  reasoning_text.replace(seg.begin, seg.end - seg.begin, piece);
  seg.path = replacement;
  seg.end = seg.begin + piece.size();
  for (std::size_t i = index + 1; i < candidates.size(); ++i) {
    candidates[i].begin = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(candidates[i].begin) + delta);
    candidates[i].end = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(candidates[i].end) + delta);
  }
}

std::string strip_path_markers(std::string_view reasoning_text) {
  std::string out = text::replace_all(std::string(reasoning_text), kPathOpen, "");
  return text::replace_all(std::move(out), kPathClose, "");
}

double parse_judge_score(std::string_view text) {
  static const std::regex number(R"([-+]?(?:\d+\.\d*|\.\d+|\d+))");
  const std::string s(text);
  std::optional<std::string> last;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), number); it != std::sregex_iterator(); ++it)
    last = it->str();
  if (!last) throw ParseError("no-number-found", "no score in judge output");
  const double v = std::stod(*last);
  if (!(v >= 0.0 && v <= 1.0))
    throw ParseError("out-of-range", "judge score " + *last + " outside [0, 1]");
  return v;
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::A: return "A";
    case Verdict::B: return "B";
    case Verdict::tie: return "tie";
  }
  return "tie";
}

Verdict verdict_from_string(std::string_view s) {
  const std::string u = text::to_lower(s);
  if (u == "a") return Verdict::A;
  if (u == "b") return Verdict::B;
  if (u == "tie") return Verdict::tie;
  throw ParseError("unrecognized-verdict", "unknown verdict '" + std::string(s) + "'");
}

Verdict parse_pairwise_verdict(std::string_view text) {
  std::string last_line;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);)
    if (!text::trim(line).empty()) last_line = line;
  // Last alphanumeric token of the final line.
  std::string token;
  for (std::size_t i = last_line.size(); i-- > 0;) {
    const unsigned char c = static_cast<unsigned char>(last_line[i]);
    if (std::isalnum(c)) token.insert(token.begin(), static_cast<char>(c));
    else if (!token.empty()) break;
  }
  const std::string t = text::to_lower(token);
  if (t == "a") return Verdict::A;
  if (t == "b") return Verdict::B;
  if (t == "tie") return Verdict::tie;
  throw ParseError("unrecognized-verdict", "no A/B/TIE verdict on the final line");
}

SentenceType parse_sentence_type_label(std::string_view text) {
  static const std::pair<std::string_view, SentenceType> kWords[] = {
      {"statement", SentenceType::declarative},      {"declarative", SentenceType::declarative},
      {"instruction", SentenceType::imperative},     {"imperative", SentenceType::imperative},
      {"question", SentenceType::interrogative},     {"interrogative", SentenceType::interrogative},
  };
  // Only a conclusion counts: the label right after "likely", or the last word
  // of the text. Quoted spans are instructions being echoed, not answers.
  const std::string lower = text::to_lower(text);
  std::vector<bool> quoted(lower.size(), false);
  bool in_quote = false;
  for (std::size_t i = 0; i < lower.size(); ++i) {
    if (lower[i] == '"') in_quote = !in_quote;
    quoted[i] = in_quote;
  }
  const std::size_t last_word_end = lower.find_last_not_of(" \t\r\n.!");
  std::optional<std::pair<std::size_t, SentenceType>> best;
  for (const auto& [word, type] : kWords) {
    for (std::size_t pos = lower.find(word); pos != std::string::npos; pos = lower.find(word, pos + 1)) {
      if (quoted[pos]) continue;
      const std::string_view before = std::string_view(lower).substr(0, pos);
      const std::string head = text::trim(before);
      const bool after_likely = head.size() >= 6 && head.compare(head.size() - 6, 6, "likely") == 0;
      const bool last = last_word_end != std::string::npos && pos + word.size() == last_word_end + 1;
      if ((after_likely || last) && (!best || pos > best->first)) best = {{pos, type}};
    }
  }
  if (!best) throw ParseError("no-sentence-type", "analysis does not conclude with a sentence type");
  return best->second;
}

std::vector<std::string> parse_numbered_utterances(std::string_view text, std::size_t expected) {
  static const std::regex item(R"(^\s*(\d+)\s*[.)]\s+(.*\S)\s*$)");
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    std::smatch m;
    if (!std::regex_match(line, m, item)) continue;
    if (std::stoul(m[1].str()) != out.size() + 1)
      throw ParseError("wrong-utterance-count", "numbered list out of order at item " + m[1].str());
    out.push_back(m[2].str());
  }
  if (out.size() != expected)
    throw ParseError("wrong-utterance-count", "expected " + std::to_string(expected) +
                                                  " utterance(s), found " + std::to_string(out.size()));
  return out;
}

std::string render_path_list(const std::vector<IntentPath>& paths) {
  std::string out;
  for (std::size_t i = 0; i < paths.size(); ++i)
    out += "Path " + std::to_string(i + 1) + ": " + render_path(paths[i]) + "\n";
  return out;
}

}  // namespace proutt
