#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "proutt/error.hpp"
#include "proutt/gateway.hpp"
#include "proutt/intent_path.hpp"
#include "proutt/sentence_type.hpp"

namespace proutt {

enum class TemplateId {
  tree_build,
  tree_repair,
  sentence_type_declarative,
  sentence_type_imperative,
  sentence_type_interrogative,
  path_reason_exploit,
  path_reason_explore,
  verbalize,
  verbalize_approx,
  alternative_path,
  judge_pointwise,
  judge_pairwise,
};

inline constexpr std::size_t kTemplateCount = 12;

/// Dotted registry name, e.g. "sentence_type.imperative".
std::string_view template_name(TemplateId id);
TemplateId template_id_from_string(std::string_view name);
std::vector<TemplateId> all_template_ids();

TemplateId sentence_type_template(SentenceType t);
TemplateId path_reason_template(Perspective p);

enum class InstructionStyle { structured, minimal };
std::string_view to_string(InstructionStyle s);
InstructionStyle instruction_style_from_string(std::string_view s);

using PromptVars = std::map<std::string, std::string>;

struct PromptTemplate {
  TemplateId id = TemplateId::tree_build;
  InstructionStyle style = InstructionStyle::structured;
  std::string version;
  std::string source;
  /// Every name used as `{{name}}`, `{{#name}}` or `{{^name}}`.
  std::set<std::string> placeholders;
};

/// Expands `{{name}}`, `{{#name}}...{{/name}}` (kept when the value is
/// non-empty) and `{{^name}}...{{/name}}` (kept when empty). Substituted values
/// are not re-scanned. Throws UsageError("unbound-placeholder") naming the
/// first missing variable.
std::string expand_template(std::string_view source, const PromptVars& vars);

std::set<std::string> template_placeholders(std::string_view source);

/// Closed set of templates, one per (id, style).
///
/// Template files hold `### system` and `### user` sections; the manifest is
/// JSON: {"templates": [{"id", "style", "file", "version"}]}.
class PromptRegistry {
 public:
  /// Templates compiled into the library.
  static const PromptRegistry& builtin();
  /// Loads a manifest and the files it names (paths relative to the manifest).
  static PromptRegistry load(const std::filesystem::path& manifest);
  static PromptRegistry from_sources(std::string_view manifest_json,
                                     const std::map<std::string, std::string>& files);

  const PromptTemplate& get(TemplateId id, InstructionStyle style) const;

  std::vector<llm::ChatMessage> render(TemplateId id, InstructionStyle style,
                                       const PromptVars& vars) const;

  /// "id.style" -> version, for record provenance.
  std::map<std::string, std::string> versions() const;

 private:
  std::map<std::pair<TemplateId, InstructionStyle>, PromptTemplate> templates_;
};

// ---------------------------------------------------------------------------
// Output parsers
// ---------------------------------------------------------------------------

inline constexpr std::string_view kPathOpen = "<<PATH>>";
inline constexpr std::string_view kPathClose = "<</PATH>>";

/// A delimited path inside a reasoning text; [begin, end) covers the markers.
struct CandidateSegment {
  IntentPath path;
  std::size_t begin = 0;
  std::size_t end = 0;

  friend bool operator==(const CandidateSegment&, const CandidateSegment&) = default;
};

struct ParsedPathCandidates {
  std::string reasoning_text;
  std::vector<CandidateSegment> candidates;
};

/// Finds every `<<PATH>>...<</PATH>>` segment. Throws
/// ParseError("wrong-candidate-count") or ParseError("unparseable-path") with
/// the 0-based segment index in the message.
ParsedPathCandidates parse_path_candidates(std::string_view text, std::size_t expected_q);

/// Replaces the path inside segment `index` and shifts later spans. All bytes
/// outside that segment are unchanged.
void splice_candidate(std::string& reasoning_text, std::vector<CandidateSegment>& candidates,
                      std::size_t index, const IntentPath& replacement);

/// Reasoning text with the markers removed, for human-facing exports.
std::string strip_path_markers(std::string_view reasoning_text);

/// Last decimal literal in the text; ParseError("no-number-found") or
/// ParseError("out-of-range") when outside [0, 1].
double parse_judge_score(std::string_view text);

enum class Verdict { A, B, tie };
std::string_view to_string(Verdict v);
Verdict verdict_from_string(std::string_view s);

/// Token on the final non-empty line (A, B or TIE, case-insensitive).
/// ParseError("unrecognized-verdict") otherwise.
Verdict parse_pairwise_verdict(std::string_view text);

/// Sentence type an analysis concludes with (Statement/Instruction/Question
/// or declarative/imperative/interrogative), taken from "... likely <label>"
/// or the final word; quoted text is ignored. ParseError("no-sentence-type").
SentenceType parse_sentence_type_label(std::string_view text);

/// Lines of the form "1. text" / "2) text"; exactly `expected` items numbered
/// 1..expected. ParseError("wrong-utterance-count").
std::vector<std::string> parse_numbered_utterances(std::string_view text, std::size_t expected);

/// "Path 1: ...\nPath 2: ..." block used in verbalization prompts.
std::string render_path_list(const std::vector<IntentPath>& paths);

/// Sends `request` and parses the reply. On ParseError the reply and a repair
/// message naming the error are appended and the request is sent once more;
/// a second failure propagates.
template <class Parse>
auto chat_parsed(llm::Gateway& gateway, llm::ChatRequest request, Parse&& parse)
    -> decltype(parse(std::string{})) {
  llm::ChatResponse first = gateway.chat(request);
  try {
    return parse(first.content);
  } catch (const ParseError& e) {
    request.messages.push_back({llm::Role::assistant, first.content});
    request.messages.push_back(
        {llm::Role::user, std::string("Your reply could not be used (") + e.kind() + ": " + e.what() +
                              "). Answer again and follow the requested output format exactly."});
    request.request_tag += ".repair";
    llm::ChatResponse second = gateway.chat(request);
    return parse(second.content);
  }
}

}  // namespace proutt
