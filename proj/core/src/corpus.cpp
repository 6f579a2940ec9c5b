#include "proutt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "proutt/error.hpp"
#include "proutt/rng.hpp"
#include "proutt/text.hpp"

namespace proutt {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Language l) { return l == Language::zh ? "zh" : "en"; }

std::string_view to_string(Source s) {
  switch (s) {
    case Source::lmsys: return "lmsys";
    case Source::sharegpt: return "sharegpt";
    case Source::wildchat: return "wildchat";
    case Source::crosswoz: return "crosswoz";
    case Source::custom: return "custom";
  }
  return "custom";
}

std::string_view to_string(CorpusFormat f) {
  switch (f) {
    case CorpusFormat::sharegpt: return "sharegpt";
    case CorpusFormat::crosswoz: return "crosswoz";
    case CorpusFormat::normalized: return "jsonl";
  }
  return "jsonl";
}

Language language_from_string(std::string_view s) {
  if (s == "en") return Language::en;
  if (s == "zh") return Language::zh;
  throw UsageError("bad-enum", "unknown language '" + std::string(s) + "'");
}

Source source_from_string(std::string_view s) {
  for (Source v : {Source::lmsys, Source::sharegpt, Source::wildchat, Source::crosswoz,
                   Source::custom}) {
    if (to_string(v) == s) return v;
  }
  throw UsageError("bad-enum", "unknown source '" + std::string(s) + "'");
}

CorpusFormat corpus_format_from_string(std::string_view s) {
  if (s == "sharegpt") return CorpusFormat::sharegpt;
  if (s == "crosswoz") return CorpusFormat::crosswoz;
  if (s == "jsonl" || s == "normalized") return CorpusFormat::normalized;
  throw UsageError("bad-enum", "unknown corpus format '" + std::string(s) + "'");
}

namespace {

enum class Role { user, assistant, system };

struct Message {
  Role role;
  std::string content;
};

Role map_role(std::string_view raw, std::string_view where) {
  const std::string r = text::to_lower(raw);
  if (r == "human" || r == "user" || r == "usr") return Role::user;
  if (r == "gpt" || r == "assistant" || r == "chatgpt" || r == "bard" || r == "bing" ||
      r == "sys" || r == "model")
    return Role::assistant;
  if (r == "system") return Role::system;
  throw ParseError("malformed-record", std::string(where) + ": unknown role '" + std::string(raw) + "'");
}

// Pairs an ordered message list into turns. Returns an empty list when the
// conversation has fewer than two complete user/assistant pairs.
std::vector<DialogueTurn> pair_messages(std::vector<Message> messages, bool strict,
                                        std::string_view where, LoadReport& report) {
  std::vector<Message> kept;
  kept.reserve(messages.size());
  for (auto& m : messages) {
    if (m.role == Role::system) {
      ++report.system_messages_dropped;
      continue;
    }
    if (kept.empty() && m.role == Role::assistant) {
      if (strict)
        throw ParseError("role-order", std::string(where) + ": conversation starts with an assistant message");
      ++report.role_repairs;
      continue;
    }
    if (!kept.empty() && kept.back().role == m.role) {
      if (strict)
        throw ParseError("role-order", std::string(where) + ": two consecutive messages with the same role");
      ++report.role_repairs;
      kept.back().content += "\n\n" + m.content;
      continue;
    }
    kept.push_back(std::move(m));
  }

  if (!kept.empty() && kept.back().role == Role::user) {
    kept.pop_back();
    ++report.trailing_user_dropped;
  }

  std::vector<DialogueTurn> turns;
  for (std::size_t i = 0; i + 1 < kept.size(); i += 2) {
    if (text::trim(kept[i].content).empty()) {
      if (strict) throw ParseError("malformed-record", std::string(where) + ": empty user message");
      break;
    }
    turns.push_back({static_cast<int>(turns.size()) + 1, kept[i].content, kept[i + 1].content});
  }
  if (turns.size() < 2) {
    ++report.skipped_short;
    return {};
  }
  return turns;
}

std::string make_id(Source source, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return std::string(to_string(source)) + "-" + buf;
}

ordered_json parse_document(std::string_view bytes, std::string_view origin) {
  try {
    return ordered_json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed-record", std::string(origin) + ": byte offset " +
                                             std::to_string(e.byte) + ": " + e.what());
  }
}

const ordered_json& require(const ordered_json& obj, const char* key, std::string_view where) {
  if (!obj.is_object() || !obj.contains(key))
    throw ParseError("malformed-record", std::string(where) + ": missing field '" + key + "'");
  return obj.at(key);
}

std::string require_string(const ordered_json& obj, const char* key, std::string_view where) {
  const auto& v = require(obj, key, where);
  if (!v.is_string())
    throw ParseError("malformed-record", std::string(where) + ": field '" + key + "' is not a string");
  return v.get<std::string>();
}

std::vector<Dialogue> parse_sharegpt(std::string_view bytes, const LoadOptions& options,
                                     LoadReport& report, std::string_view origin) {
  const ordered_json doc = parse_document(bytes, origin);
  if (!doc.is_array())
    throw ParseError("malformed-record", std::string(origin) + ": expected a top-level JSON array");
  const Source source = options.source.value_or(Source::sharegpt);
  const Language language = options.language.value_or(Language::en);

  std::vector<Dialogue> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const std::string where = std::string(origin) + ": record " + std::to_string(i);
    const auto& convs = require(doc[i], "conversations", where);
    if (!convs.is_array())
      throw ParseError("malformed-record", where + ": 'conversations' is not an array");
    std::vector<Message> messages;
    for (const auto& m : convs) {
      messages.push_back({map_role(require_string(m, "from", where), where),
                          require_string(m, "value", where)});
    }
    ++report.conversations;
    auto turns = pair_messages(std::move(messages), options.strict, where, report);
    if (turns.empty()) continue;
    std::string id = doc[i].contains("id") && doc[i]["id"].is_string()
                         ? doc[i]["id"].get<std::string>()
                         : make_id(source, i);
    out.push_back({std::move(id), language, source, std::move(turns)});
  }
  return out;
}

std::vector<Dialogue> parse_crosswoz(std::string_view bytes, const LoadOptions& options,
                                     LoadReport& report, std::string_view origin) {
  const ordered_json doc = parse_document(bytes, origin);
  if (!doc.is_object())
    throw ParseError("malformed-record", std::string(origin) + ": expected a top-level JSON object");
  const Source source = options.source.value_or(Source::crosswoz);
  const Language language = options.language.value_or(Language::zh);

  std::vector<Dialogue> out;
  std::size_t index = 0;
  for (const auto& [key, value] : doc.items()) {
    const std::string where = std::string(origin) + ": dialogue '" + key + "'";
    const auto& msgs = require(value, "messages", where);
    if (!msgs.is_array())
      throw ParseError("malformed-record", where + ": 'messages' is not an array");
    std::vector<Message> messages;
    for (const auto& m : msgs) {
      messages.push_back({map_role(require_string(m, "role", where), where),
                          require_string(m, "content", where)});
    }
    ++report.conversations;
    auto turns = pair_messages(std::move(messages), options.strict, where, report);
    const std::size_t this_index = index++;
    if (turns.empty()) continue;
    out.push_back({make_id(source, this_index), language, source, std::move(turns)});
  }
  return out;
}

std::vector<Dialogue> parse_normalized(std::string_view bytes, const LoadOptions& options,
                                       LoadReport& report, std::string_view origin) {
  std::vector<Dialogue> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < bytes.size()) {
    std::size_t end = bytes.find('\n', start);
    if (end == std::string_view::npos) end = bytes.size();
    const std::string_view line = bytes.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (text::trim(line).empty()) continue;
    const std::string where = std::string(origin) + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("malformed-record", where + ": " + e.what());
    }
    Dialogue d;
    try {
      d = j.get<Dialogue>();
    } catch (const Error& e) {
      throw ParseError("malformed-record", where + ": " + e.what());
    } catch (const json::exception& e) {
      throw ParseError("malformed-record", where + ": " + e.what());
    }
    if (options.source) d.source = *options.source;
    if (options.language) d.language = *options.language;
    ++report.conversations;
    for (const auto& t : d.turns) {
      if (text::trim(t.user_utterance).empty())
        throw ParseError("malformed-record", where + ": empty user utterance in turn " +
                                                 std::to_string(t.index));
    }
    if (!d.eligible()) {
      ++report.skipped_short;
      continue;
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace

std::vector<Dialogue> parse_corpus(std::string_view bytes, CorpusFormat format,
                                   const LoadOptions& options, LoadReport* report,
                                   std::string_view origin) {
  LoadReport local;
  LoadReport& r = report ? *report : local;
  r = LoadReport{};
  if (text::trim(bytes).empty()) return {};

  std::vector<Dialogue> out;
  switch (format) {
    case CorpusFormat::sharegpt: out = parse_sharegpt(bytes, options, r, origin); break;
    case CorpusFormat::crosswoz: out = parse_crosswoz(bytes, options, r, origin); break;
    case CorpusFormat::normalized: out = parse_normalized(bytes, options, r, origin); break;
  }
  r.dialogues = out.size();
  if (r.system_messages_dropped > 0)
    spdlog::warn("{}: dropped {} system message(s)", origin, r.system_messages_dropped);
  return out;
}

std::vector<Dialogue> load_corpus(const std::filesystem::path& path, CorpusFormat format,
                                  const LoadOptions& options, LoadReport* report) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("io", "cannot open corpus file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_corpus(ss.str(), format, options, report, path.string());
}

void write_corpus(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("io", "cannot write " + path.string());
  for (const auto& d : dialogues) out << json(d).dump() << '\n';
}

std::vector<Dialogue> sample_dialogues(std::vector<Dialogue> dialogues, std::size_t limit,
                                       std::optional<std::uint64_t> seed) {
  if (limit >= dialogues.size()) return dialogues;
  if (!seed) {
    dialogues.resize(limit);
    return dialogues;
  }
  std::vector<std::size_t> order(dialogues.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(*seed);
  for (std::size_t i = 0; i < limit; ++i) {
    const std::size_t j = i + rng.uniform_index(order.size() - i);
    std::swap(order[i], order[j]);
  }
  order.resize(limit);
  std::sort(order.begin(), order.end());
  std::vector<Dialogue> out;
  out.reserve(limit);
  for (std::size_t i : order) out.push_back(std::move(dialogues[i]));
  return out;
}

DialogueContext prefix(const Dialogue& dialogue, int k) {
  if (k < 1 || k > dialogue.turn_count() - 1)
    throw UsageError("out-of-range", "prefix length " + std::to_string(k) +
                                         " outside [1, " + std::to_string(dialogue.turn_count() - 1) +
                                         "] for dialogue " + dialogue.id);
  DialogueContext ctx;
  ctx.dialogue_id = dialogue.id;
  ctx.k = k;
  ctx.turns.assign(dialogue.turns.begin(), dialogue.turns.begin() + k);
  return ctx;
}

std::pair<std::string, std::vector<IntentPath>> gt_next(const Dialogue& dialogue,
                                                        const PerTurnPaths& per_turn_paths, int k) {
  if (k < 1 || k > dialogue.turn_count() - 1)
    throw UsageError("out-of-range", "no next turn after " + std::to_string(k) + " in dialogue " +
                                         dialogue.id);
  auto it = per_turn_paths.find(k + 1);
  if (it == per_turn_paths.end() || it->second.empty())
    throw UsageError("missing-path-annotation", "no intent paths annotated for turn " +
                                                    std::to_string(k + 1) + " of dialogue " +
                                                    dialogue.id);
  return {dialogue.turns[static_cast<std::size_t>(k)].user_utterance, it->second};
}

std::string render_context(const std::vector<DialogueTurn>& turns) {
  std::string out;
  for (const auto& t : turns) {
    const std::string tag = "[Turn " + std::to_string(t.index) + "] ";
    out += tag + "User: " + t.user_utterance + "\n";
    out += tag + "Assistant: " + t.assistant_utterance + "\n";
  }
  return out;
}

void to_json(json& j, const DialogueTurn& t) {
  j = json{{"user", t.user_utterance}, {"assistant", t.assistant_utterance}};
}

void to_json(json& j, const Dialogue& d) {
  j = json{{"id", d.id},
           {"language", to_string(d.language)},
           {"source", to_string(d.source)},
           {"turns", d.turns}};
}

namespace {
std::vector<DialogueTurn> turns_from_json(const json& arr) {
  if (!arr.is_array()) throw ParseError("malformed-record", "'turns' is not an array");
  std::vector<DialogueTurn> turns;
  for (const auto& t : arr) {
    turns.push_back({static_cast<int>(turns.size()) + 1, t.at("user").get<std::string>(),
                     t.at("assistant").get<std::string>()});
  }
  return turns;
}
}  // namespace

void from_json(const json& j, Dialogue& d) {
  d.id = j.at("id").get<std::string>();
  d.language = language_from_string(j.value("language", std::string("en")));
  d.source = source_from_string(j.value("source", std::string("custom")));
  d.turns = turns_from_json(j.at("turns"));
}

void to_json(json& j, const DialogueContext& c) {
  j = json{{"dialogue_id", c.dialogue_id}, {"k", c.k}, {"turns", c.turns}};
}

void from_json(const json& j, DialogueContext& c) {
  c.dialogue_id = j.at("dialogue_id").get<std::string>();
  c.k = j.at("k").get<int>();
  c.turns = turns_from_json(j.at("turns"));
  if (static_cast<int>(c.turns.size()) != c.k)
    throw ParseError("schema-violation", "context turn count does not match k");
}

}  // namespace proutt
