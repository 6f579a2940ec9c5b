#include "proutt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

#include "proutt/error.hpp"
#include "proutt/text.hpp"

namespace proutt {

using nlohmann::json;

namespace {

json side_json(const PathReasoning& r) { return {{"reasoning", r.reasoning_text}, {"paths", r.paths()}}; }

json trajectory_json(const Trajectory& t) {
  return {{"sentence_type", t.sentence_type ? json(std::string(to_string(*t.sentence_type))) : json(nullptr)},
          {"sentence_reasoning", t.sentence_reasoning},
          {"exploit", side_json(t.exploit)},
          {"explore", side_json(t.explore)},
          {"responses", t.responses}};
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw ParseError("schema-violation", std::string(where) + " is not an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ParseError("schema-violation", "unknown field '" + it.key() + "' in " + std::string(where));
}

const json& need(const json& j, const char* key, std::string_view where) {
  if (!j.is_object() || !j.contains(key))
    throw ParseError("schema-violation", "missing field '" + std::string(key) + "' in " + std::string(where));
  return j.at(key);
}

PathReasoning side_from_json(const json& j, Perspective p, bool strict, const std::string& where) {
  if (strict) check_keys(j, {"reasoning", "paths"}, where);
  PathReasoning r;
  r.perspective = p;
  r.reasoning_text = need(j, "reasoning", where).get<std::string>();
  const auto paths = need(j, "paths", where).get<std::vector<IntentPath>>();
  if (paths.empty()) {
    if (r.reasoning_text.find(kPathOpen) != std::string::npos)
      throw ParseError("schema-violation", where + ": reasoning has marked paths but 'paths' is empty");
    return r;
  }
  auto parsed = parse_path_candidates(r.reasoning_text, paths.size());
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (path_key(parsed.candidates[i].path) != path_key(paths[i]))
      throw ParseError("schema-violation", where + ": path " + std::to_string(i) + " does not match the reasoning");
    parsed.candidates[i].path = paths[i];
  }
  r.candidates = std::move(parsed.candidates);
  return r;
}

Trajectory trajectory_from_json(const json& j, bool strict, const std::string& where) {
  if (strict) check_keys(j, {"sentence_type", "sentence_reasoning", "exploit", "explore", "responses"}, where);
  Trajectory t;
  const json& st = need(j, "sentence_type", where);
  if (!st.is_null()) t.sentence_type = sentence_type_from_string(st.get<std::string>());
  t.sentence_reasoning = need(j, "sentence_reasoning", where).get<std::string>();
  t.exploit = side_from_json(need(j, "exploit", where), Perspective::exploitation, strict, where + ".exploit");
  t.explore = side_from_json(need(j, "explore", where), Perspective::exploration, strict, where + ".explore");
  t.responses = need(j, "responses", where).get<std::vector<std::string>>();
  return t;
}

std::string responses_block(const std::vector<std::string>& responses) {
  std::string out = "The user's next input is most likely one of the following:";
  for (std::size_t i = 0; i < responses.size(); ++i) out += "\n" + std::to_string(i + 1) + ". " + responses[i];
  return out;
}

std::string dpo_side(const Trajectory& t) {
  std::vector<std::string> parts;
  if (!t.sentence_reasoning.empty()) parts.push_back(t.sentence_reasoning);
  if (!t.exploit.reasoning_text.empty()) parts.push_back(strip_path_markers(t.exploit.reasoning_text));
  if (!t.explore.reasoning_text.empty()) parts.push_back(strip_path_markers(t.explore.reasoning_text));
  parts.push_back(responses_block(t.responses));
  return text::join(parts, "\n\n");
}

double mean(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace

// ---------------------------------------------------------------------------

json record_to_json(const PreferenceRecord& r) {
  json context = json::array();
  for (const auto& t : r.context.turns) context.push_back(t);
  json j{{"dialogue_id", r.dialogue_id},
         {"k", r.k},
         {"context", context},
         {"intent_tree", r.tree_prefix},
         {"gt_utterance", r.gt_utterance},
         {"gt_paths", r.gt_paths},
         {"chosen", trajectory_json(r.chosen)},
         {"rejected", trajectory_json(r.rejected)},
         {"j_max", r.j_max},
         {"branch", std::string(to_string(r.branch))},
         {"gt_perspective", std::string(to_string(r.gt_perspective))},
         {"seed", r.seed},
         {"provenance",
          {{"models", r.provenance.models},
           {"templates", r.provenance.templates},
           {"config_digest", r.provenance.config_digest},
           {"instruction_style", std::string(to_string(r.provenance.instruction_style))},
           {"tree_ablated", r.provenance.tree_ablated}}}};
  if (r.epsilon) j["epsilon"] = *r.epsilon;
  return j;
}

PreferenceRecord record_from_json(const json& j, bool strict) {
  const std::string where = "record";
  if (strict)
    check_keys(j,
               {"dialogue_id", "k", "context", "intent_tree", "gt_utterance", "gt_paths", "chosen", "rejected",
                "j_max", "branch", "gt_perspective", "epsilon", "seed", "provenance"},
               where);
  PreferenceRecord r;
  try {
    r.dialogue_id = need(j, "dialogue_id", where).get<std::string>();
    r.k = need(j, "k", where).get<int>();
    if (r.k < 1) throw ParseError("schema-violation", "k must be positive");
    r.context.dialogue_id = r.dialogue_id;
    r.context.k = r.k;
    const json& ctx = need(j, "context", where);
    if (!ctx.is_array()) throw ParseError("schema-violation", "'context' is not an array");
    for (const auto& t : ctx) {
      if (strict) check_keys(t, {"user", "assistant"}, "context turn");
      r.context.turns.push_back({static_cast<int>(r.context.turns.size()) + 1,
                                 need(t, "user", "context turn").get<std::string>(),
                                 need(t, "assistant", "context turn").get<std::string>()});
    }
    if (static_cast<int>(r.context.turns.size()) != r.k)
      throw ParseError("schema-violation", "context has " + std::to_string(r.context.turns.size()) +
                                               " turns but k is " + std::to_string(r.k));
    r.tree_prefix = need(j, "intent_tree", where).get<IntentTree>();
    r.gt_utterance = need(j, "gt_utterance", where).get<std::string>();
    r.gt_paths = need(j, "gt_paths", where).get<std::vector<IntentPath>>();
    r.chosen = trajectory_from_json(need(j, "chosen", where), strict, "chosen");
    r.rejected = trajectory_from_json(need(j, "rejected", where), strict, "rejected");
    r.j_max = need(j, "j_max", where).get<double>();
    if (!(r.j_max >= 0.0 && r.j_max <= 1.0)) throw ParseError("schema-violation", "j_max outside [0, 1]");
    r.branch = branch_from_string(need(j, "branch", where).get<std::string>());
    r.gt_perspective = perspective_from_string(need(j, "gt_perspective", where).get<std::string>());
    if (j.contains("epsilon") && !j.at("epsilon").is_null()) {
      r.epsilon = j.at("epsilon").get<int>();
      if (*r.epsilon < 2) throw ParseError("schema-violation", "epsilon below 2");
    }
    r.seed = need(j, "seed", where).get<std::uint64_t>();
    const json& prov = need(j, "provenance", where);
    if (strict) check_keys(prov, {"models", "templates", "config_digest", "instruction_style", "tree_ablated"},
                           "provenance");
    r.provenance.models = need(prov, "models", "provenance").get<std::map<std::string, std::string>>();
    r.provenance.templates = need(prov, "templates", "provenance").get<std::map<std::string, std::string>>();
    r.provenance.config_digest = need(prov, "config_digest", "provenance").get<std::string>();
    r.provenance.instruction_style =
        instruction_style_from_string(need(prov, "instruction_style", "provenance").get<std::string>());
    r.provenance.tree_ablated = prov.value("tree_ablated", false);
  } catch (const json::exception& e) {
    throw ParseError("schema-violation", e.what());
  } catch (const ParseError& e) {
    if (e.kind() == "schema-violation") throw;
    throw ParseError("schema-violation", e.kind() + ": " + e.what());
  }
  return r;
}

std::string serialize_records(const std::vector<PreferenceRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

void write_records(const std::filesystem::path& path, const std::vector<PreferenceRecord>& records) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("io-error", "cannot write " + path.string());
  f << serialize_records(records);
  if (!f) throw Error("io-error", "write failed for " + path.string());
}

std::vector<PreferenceRecord> parse_records(std::string_view jsonl, bool strict, std::string_view origin) {
  std::vector<PreferenceRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < jsonl.size()) {
    std::size_t nl = jsonl.find('\n', pos);
    if (nl == std::string_view::npos) nl = jsonl.size();
    const std::string_view line = jsonl.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line), strict));
    } catch (const json::exception& e) {
      throw ParseError("schema-violation", std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("schema-violation", std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<PreferenceRecord> read_records(const std::filesystem::path& path, bool strict) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io-error", "cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_records(ss.str(), strict, path.string());
}

// ---------------------------------------------------------------------------

Tokenizer whitespace_tokenizer() {
  return {"whitespace", [](std::string_view s) { return text::split_whitespace(s).size(); }};
}

Tokenizer subprocess_tokenizer(std::string command) {
  auto count = [command](std::string_view s) -> std::size_t {
    char name[] = "/tmp/proutt-tok-XXXXXX";
    const int fd = mkstemp(name);
    if (fd < 0) throw Error("tokenizer-failed", "cannot create a temporary file");
    {
      std::size_t off = 0;
      while (off < s.size()) {
        const ssize_t n = ::write(fd, s.data() + off, s.size() - off);
        if (n <= 0) break;
        off += static_cast<std::size_t>(n);
      }
      ::close(fd);
    }
    const std::string cmd = command + " < '" + name + "'";
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) {
      std::remove(name);
      throw Error("tokenizer-failed", "cannot run " + command);
    }
    std::string out;
    char buf[256];
    while (std::fgets(buf, sizeof buf, p)) out += buf;
    const int rc = ::pclose(p);
    std::remove(name);
    const std::string t = text::trim(out);
    if (rc != 0 || t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }))
      throw Error("tokenizer-failed", "tokenizer command returned '" + t + "'");
    return static_cast<std::size_t>(std::stoull(t));
  };
  return {"subprocess:" + command, count};
}

json to_json(const StatsReport& s) {
  return {{"sample_count", s.sample_count},
          {"avg_chars", s.avg_chars},
          {"avg_tokens", s.avg_tokens},
          {"delta_chars_mean", s.delta_chars_mean},
          {"delta_tokens_mean", s.delta_tokens_mean},
          {"delta_tokens_std", s.delta_tokens_std},
          {"delta_tokens_max_abs", s.delta_tokens_max_abs},
          {"tokenizer_id", s.tokenizer_id},
          {"std_form", "population"}};
}

std::string trajectory_text(const Trajectory& t) {
  std::vector<std::string> parts;
  for (const std::string* s : {&t.sentence_reasoning, &t.exploit.reasoning_text, &t.explore.reasoning_text})
    if (!s->empty()) parts.push_back(*s);
  for (const auto& r : t.responses) parts.push_back(r);
  return text::join(parts, "\n");
}

StatsReport compute_stats(const std::vector<PreferenceRecord>& records, const Tokenizer& tokenizer) {
  StatsReport s;
  s.tokenizer_id = tokenizer.id;
  s.sample_count = records.size();
  if (records.empty()) return s;

  std::vector<double> chars, tokens, dchars, dtokens;
  for (const auto& r : records) {
    const std::string c = trajectory_text(r.chosen);
    const std::string j = trajectory_text(r.rejected);
    const auto cc = static_cast<double>(text::utf8_length(c));
    const auto jc = static_cast<double>(text::utf8_length(j));
    const auto ct = static_cast<double>(tokenizer.count(c));
    const auto jt = static_cast<double>(tokenizer.count(j));
    chars.insert(chars.end(), {cc, jc});
    tokens.insert(tokens.end(), {ct, jt});
    dchars.push_back(cc - jc);
    dtokens.push_back(ct - jt);
  }
  s.avg_chars = mean(chars);
  s.avg_tokens = mean(tokens);
  s.delta_chars_mean = mean(dchars);
  s.delta_tokens_mean = mean(dtokens);
  double var = 0.0;
  for (double d : dtokens) var += (d - s.delta_tokens_mean) * (d - s.delta_tokens_mean);
  s.delta_tokens_std = std::sqrt(var / static_cast<double>(dtokens.size()));
  for (double d : dtokens) s.delta_tokens_max_abs = std::max<std::int64_t>(s.delta_tokens_max_abs, std::llabs(std::llround(d)));
  return s;
}

// ---------------------------------------------------------------------------

DpoTriple to_dpo(const PreferenceRecord& r) {
  const bool minimal = r.provenance.instruction_style == InstructionStyle::minimal;
  const bool has_tree = !r.provenance.tree_ablated && !r.tree_prefix.empty();
  const bool has_types = !r.chosen.sentence_reasoning.empty();

  std::string prompt = "Predict the user's next input in the conversation below.\n\nConversation so far:\n" +
                       render_context(r.context.turns);
  if (has_tree) prompt += "\n\n[User Intent Tree]:\n" + render_tree(r.tree_prefix, false);
  if (!minimal) {
    prompt += "\n\nReason step by step before answering.";
    if (has_types) prompt += "\n- Analyse the sentence type of the next input: statement, instruction or question.";
    if (has_tree) {
      prompt += "\n- From the mining view, propose next-step paths that add attributes or change values under "
                "topics already in the intent tree.";
      prompt += "\n- From the exploration view, propose closely related topics that are not yet in the tree.";
    } else {
      prompt += "\n- From the mining view, propose next-step intents that refine what the user already asked for.";
      prompt += "\n- From the exploration view, propose closely related new directions.";
    }
    prompt += "\n- Turn each proposed intent into a candidate next input.";
  } else {
    prompt += "\n\nList the most likely next inputs.";
  }
  return {prompt, dpo_side(r.chosen), dpo_side(r.rejected)};
}

std::size_t export_dpo(const std::vector<PreferenceRecord>& records, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("io-error", "cannot write " + path.string());
  std::size_t n = 0;
  for (const auto& r : records) {
    const DpoTriple t = to_dpo(r);
    f << json{{"prompt", t.prompt}, {"chosen", t.chosen}, {"rejected", t.rejected}}.dump() << '\n';
    ++n;
  }
  if (!f) throw Error("io-error", "write failed for " + path.string());
  return n;
}

std::pair<std::vector<PreferenceRecord>, std::vector<PreferenceRecord>> split_records(
    std::vector<PreferenceRecord> records, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw UsageError("bad-fraction", "fraction must lie in [0, 1]");
  Rng rng(seed);
  for (std::size_t i = records.size(); i > 1; --i) std::swap(records[i - 1], records[rng.uniform_index(i)]);
  const auto cut = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(records.size())));
  std::vector<PreferenceRecord> second(std::make_move_iterator(records.begin() + static_cast<std::ptrdiff_t>(cut)),
                                       std::make_move_iterator(records.end()));
  records.resize(cut);
  return {std::move(records), std::move(second)};
}

}  // namespace proutt
