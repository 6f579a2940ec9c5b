#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "proutt/intent_path.hpp"

namespace proutt {

enum class Language { en, zh };
enum class Source { lmsys, sharegpt, wildchat, crosswoz, custom };

/// On-disk layout of a corpus file.
enum class CorpusFormat {
  sharegpt,    ///< JSON array of {"conversations": [{"from", "value"}]}
  crosswoz,    ///< JSON object keyed by dialogue id, {"messages": [{"role", "content"}]}
  normalized,  ///< JSONL, one Dialogue per line
};

std::string_view to_string(Language l);
std::string_view to_string(Source s);
std::string_view to_string(CorpusFormat f);
Language language_from_string(std::string_view s);
Source source_from_string(std::string_view s);
CorpusFormat corpus_format_from_string(std::string_view s);

struct DialogueTurn {
  int index = 1;
  std::string user_utterance;
  std::string assistant_utterance;

  friend bool operator==(const DialogueTurn&, const DialogueTurn&) = default;
};

struct Dialogue {
  std::string id;
  Language language = Language::en;
  Source source = Source::custom;
  std::vector<DialogueTurn> turns;

  int turn_count() const { return static_cast<int>(turns.size()); }
  /// A ground-truth next utterance exists for at least one prefix.
  bool eligible() const { return turns.size() >= 2; }

  friend bool operator==(const Dialogue&, const Dialogue&) = default;
};

struct DialogueContext {
  std::string dialogue_id;
  int k = 1;
  std::vector<DialogueTurn> turns;

  friend bool operator==(const DialogueContext&, const DialogueContext&) = default;
};

struct LoadOptions {
  /// Source tag for ids and records; defaults from the format when unset.
  std::optional<Source> source;
  std::optional<Language> language;
  /// Reject role-order violations instead of repairing them.
  bool strict = false;
};

struct LoadReport {
  std::size_t conversations = 0;
  std::size_t dialogues = 0;
  std::size_t skipped_short = 0;
  std::size_t system_messages_dropped = 0;
  std::size_t trailing_user_dropped = 0;
  std::size_t role_repairs = 0;
};

std::vector<Dialogue> load_corpus(const std::filesystem::path& path, CorpusFormat format,
                                  const LoadOptions& options = {}, LoadReport* report = nullptr);

/// Same as load_corpus but over in-memory bytes; `origin` names the input in errors.
std::vector<Dialogue> parse_corpus(std::string_view bytes, CorpusFormat format,
                                   const LoadOptions& options = {}, LoadReport* report = nullptr,
                                   std::string_view origin = "<memory>");

void write_corpus(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues);

/// First `limit` dialogues, or a seeded uniform sample of that size kept in
/// input order when `seed` is given.
std::vector<Dialogue> sample_dialogues(std::vector<Dialogue> dialogues, std::size_t limit,
                                       std::optional<std::uint64_t> seed);

/// First k turns. Requires 1 <= k <= N-1.
DialogueContext prefix(const Dialogue& dialogue, int k);

/// Ground-truth next utterance u_{k+1} and the paths introduced at turn k+1.
std::pair<std::string, std::vector<IntentPath>> gt_next(const Dialogue& dialogue,
                                                        const PerTurnPaths& per_turn_paths, int k);

/// "[Turn i] User: ...\n[Turn i] Assistant: ..." block used in prompts.
std::string render_context(const std::vector<DialogueTurn>& turns);

void to_json(nlohmann::json& j, const DialogueTurn& t);
void to_json(nlohmann::json& j, const Dialogue& d);
void from_json(const nlohmann::json& j, Dialogue& d);
void to_json(nlohmann::json& j, const DialogueContext& c);
void from_json(const nlohmann::json& j, DialogueContext& c);

}  // namespace proutt
