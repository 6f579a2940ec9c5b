#include "proutt/synthesis.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <thread>

#include <spdlog/spdlog.h>

#include "proutt/error.hpp"
#include "proutt/text.hpp"

namespace proutt {

using nlohmann::json;

namespace {

constexpr std::string_view kBranchNames[] = {"preferred_direct", "uncertain", "nonpreferred_direct"};

std::string tree_var(const SynthesisEnv& env, const IntentTree& tree) {
  if (env.config.ablations.disable_intent_tree) return {};
  return render_tree(tree, false);
}

const IntentNode* find_topic(const IntentTree& tree, std::string_view label) {
  const std::string key = text::normalize(label);
  for (const auto& t : tree.topics)
    if (text::normalize(t.label) == key) return &t;
  return nullptr;
}

std::vector<IntentPath> concat(const std::vector<IntentPath>& a, const std::vector<IntentPath>& b) {
  std::vector<IntentPath> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::string first_word(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size() && !std::isalnum(static_cast<unsigned char>(s[i]))) ++i;
  std::size_t j = i;
  while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '\'')) ++j;
  return text::to_lower(s.substr(i, j - i));
}

std::string_view rest_after_word(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size() && !std::isalnum(static_cast<unsigned char>(s[i]))) ++i;
  while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '\'')) ++i;
  return s.substr(i);
}

bool in(std::string_view w, std::initializer_list<std::string_view> set) {
  return std::find(set.begin(), set.end(), w) != set.end();
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.size() >= prefix.size() && s.substr(0, prefix.size()) == prefix;
}

// Strips closing quotes, brackets and whitespace so the terminal mark is visible.
std::string_view strip_trailing(std::string_view s) {
  while (!s.empty()) {
    const unsigned char c = static_cast<unsigned char>(s.back());
    if (std::isspace(c) || c == '"' || c == '\'' || c == ')' || c == ']' || c == '*' || c == '`') {
      s.remove_suffix(1);
    } else if (ends_with(s, "\xE2\x80\x9D") || ends_with(s, "\xE3\x80\x8D")) {  // ” 」
      s.remove_suffix(3);
    } else {
      break;
    }
  }
  return s;
}

SentenceType classify_en(std::string_view u) {
  static const std::initializer_list<std::string_view> wh = {
      "what", "why", "how", "who", "whom", "whose", "when", "where", "which"};
  static const std::initializer_list<std::string_view> aux = {
      "is",     "are",    "am",      "was",     "were",     "do",       "does",    "did",
      "can",    "could",  "would",   "will",    "shall",    "should",   "may",     "might",
      "have",   "has",    "had",     "isn't",   "aren't",   "don't",    "doesn't", "didn't",
      "can't",  "won't",  "wouldn't", "shouldn't", "couldn't", "wasn't", "weren't"};
  static const std::initializer_list<std::string_view> subjects = {
      "you", "i", "we", "they", "he", "she", "it", "this", "that", "there", "these", "those",
      "the", "a", "an", "my", "your", "any", "anyone", "someone", "me", "our", "their"};
  static const std::initializer_list<std::string_view> fillers = {
      "please", "pls", "kindly", "now", "ok", "okay", "so", "then", "and", "also", "just", "great",
      "thanks", "good", "nice", "cool", "alright", "hi", "hello", "hey"};
  static const std::initializer_list<std::string_view> verbs = {
      "add",       "answer",   "apply",    "analyze",  "analyse",  "build",     "calculate",
      "change",    "check",    "choose",   "classify", "compare",  "complete",  "compose",
      "continue",  "convert",  "correct",  "create",   "debug",    "define",    "describe",
      "design",    "develop",  "draft",    "draw",     "edit",     "elaborate", "enumerate",
      "evaluate",  "expand",   "explain",  "extract",  "find",     "fix",       "format",
      "generate",  "give",     "go",       "help",     "identify", "implement", "improve",
      "include",   "insert",   "keep",     "list",     "make",     "modify",    "name",
      "optimize",  "paraphrase", "plan",   "polish",   "prepare",  "proofread", "provide",
      "put",       "recommend", "refactor", "remove",  "rephrase", "replace",   "rewrite",
      "run",       "say",      "show",     "simplify", "solve",    "sort",      "suggest",
      "summarize", "summarise", "tell",    "translate", "try",     "turn",      "update",
      "use",       "write",    "let's",    "let",      "imagine",  "pretend",   "act",
      "describe",  "note",     "consider", "shorten",  "lengthen", "reply",     "respond",
      "return",    "remember", "stop",     "start",    "do",       "take",      "send",
      "don't",     "never",    "count",     "predict",  "review",   "set",      "merge",    "split",     "delete"};

  const std::string_view t = strip_trailing(u);
  if (ends_with(t, "?") || ends_with(t, "\xEF\xBC\x9F")) return SentenceType::interrogative;

  std::string w = first_word(u);
  std::string_view rest = rest_after_word(u);
  if (in(w, wh)) return SentenceType::interrogative;
  if (in(w, aux)) {
    const std::string next = first_word(rest);
    const bool pronoun = in(next, {"you", "i", "we", "they"});
    if (w == "do" ? pronoun : in(next, subjects)) return SentenceType::interrogative;
  }

  bool had_filler = false;
  for (int guard = 0; guard < 4 && in(w, fillers); ++guard) {
    had_filler = had_filler || w == "please" || w == "kindly" || w == "pls";
    w = first_word(rest);
    rest = rest_after_word(rest);
  }
  if (had_filler) return SentenceType::imperative;
  if (in(w, wh)) return SentenceType::interrogative;
  if (in(w, verbs)) return SentenceType::imperative;
  return SentenceType::declarative;
}

SentenceType classify_zh(std::string_view u) {
  const std::string trimmed = text::trim(u);
  const std::string_view t = strip_trailing(trimmed);
  if (ends_with(t, "?") || ends_with(t, "\xEF\xBC\x9F")) return SentenceType::interrogative;
  for (std::string_view particle : {"吗", "呢", "么", "吗。", "呢。"})
    if (ends_with(t, particle)) return SentenceType::interrogative;
  for (std::string_view marker : {"什么", "为什么", "怎么", "怎样", "如何", "哪", "谁", "几",
                                  "多少", "是否", "是不是", "能不能", "可不可以", "有没有"})
    if (trimmed.find(marker) != std::string::npos) return SentenceType::interrogative;
  for (std::string_view directive : {"请", "帮", "给我", "麻烦"})
    if (starts_with(trimmed, directive)) return SentenceType::imperative;
  if (trimmed.find("帮我") != std::string::npos) return SentenceType::imperative;
  return SentenceType::declarative;
}

json model_json(const llm::ModelParams& m) {
  return {{"model_id", m.model_id},
          {"temperature", m.temperature},
          {"top_p", m.top_p},
          {"max_tokens", m.max_tokens}};
}

void model_from_json(const json& j, llm::ModelParams& m) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "model_id") m.model_id = it->get<std::string>();
    else if (it.key() == "temperature") m.temperature = it->get<double>();
    else if (it.key() == "top_p") m.top_p = it->get<double>();
    else if (it.key() == "max_tokens") m.max_tokens = it->get<int>();
    else throw UsageError("bad-config", "unknown model key: " + it.key());
  }
}

std::vector<double> similarities(const std::vector<CandidateSegment>& cands,
                                 const std::vector<IntentPath>& gt, llm::Embedder& embedder) {
  std::vector<double> out;
  out.reserve(cands.size());
  for (const auto& c : cands) out.push_back(path_set_similarity({c.path}, gt, embedder));
  return out;
}

// Indices ordered by decreasing similarity, ties by position.
std::vector<std::size_t> by_similarity(const std::vector<double>& sims) {
  std::vector<std::size_t> idx(sims.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  return idx;
}

void put_path(PathReasoning& r, std::size_t index, const IntentPath& replacement) {
  if (path_key(r.candidates[index].path) == path_key(replacement)) {
    r.candidates[index].path = replacement;  // same intent: keep the original bytes
    return;
  }
  splice_candidate(r.reasoning_text, r.candidates, index, replacement);
}

std::string perspective_word(Perspective p) {
  return p == Perspective::exploitation ? "mining" : "exploration";
}

std::string perspective_rule(const SynthesisEnv& env, Perspective p, const IntentTree& tree) {
  if (env.config.ablations.disable_intent_tree || tree.empty()) return {};
  std::vector<std::string> labels;
  for (const auto& t : tree.topics) labels.push_back(t.label);
  const std::string list = text::join(labels, ", ");
  if (p == Perspective::exploitation) return "Every path must start with one of these existing topics: " + list + ".";
  return "Every path must start with a new topic that is none of: " + list + ".";
}

std::vector<IntentPath> alternative_paths(const SynthesisEnv& env, const DialogueContext& context,
                                          const IntentTree& tree_prefix, const std::vector<IntentPath>& gt_paths,
                                          std::string_view gt_utterance, Perspective perspective,
                                          std::size_t count, const std::vector<IntentPath>& exclude) {
  const auto& cfg = env.config;
  PromptVars vars{{"dialogue", render_context(context.turns)},
                  {"tree", tree_var(env, tree_prefix)},
                  {"reference_paths", render_path_list(gt_paths)},
                  {"count", std::to_string(count)},
                  {"perspective", perspective_word(perspective)},
                  {"perspective_rule", perspective_rule(env, perspective, tree_prefix)}};
  auto messages = env.prompts.render(TemplateId::alternative_path, cfg.instruction_style, vars);
  guard_prompt(messages, gt_utterance);
  auto parse = [&](const std::string& out) {
    auto parsed = parse_path_candidates(out, count);
    std::vector<IntentPath> paths;
    std::vector<std::string> keys;
    for (const auto& e : exclude) keys.push_back(path_key(e));
    for (auto& seg : parsed.candidates) {
      IntentPath p = seg.path;
      p.turn_introduced = context.k + 1;
      const std::string key = path_key(p);
      if (std::find(keys.begin(), keys.end(), key) != keys.end())
        throw ParseError("duplicate-alternative", "alternative repeats an existing path: " + render_path(p));
      if (path_set_similarity({p}, gt_paths, env.embedder) >= cfg.path_similarity_threshold)
        throw ParseError("alternative-too-close", "alternative too similar to the reference: " + render_path(p));
      if (!cfg.ablations.disable_intent_tree && !fits_perspective(p, perspective, tree_prefix))
        throw ParseError("perspective-violation",
                         "alternative " + render_path(p) + " is not a " + perspective_word(perspective) + " path");
      keys.push_back(key);
      paths.push_back(std::move(p));
    }
    return paths;
  };
  try {
    return chat_parsed(env.gateway, cfg.models.reason.request(std::move(messages), "alternative_path"), parse);
  } catch (const ParseError& e) {
    throw Error("fallback-generation-failure", std::string("alternative path generation failed: ") + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<IntentPath> PathReasoning::paths() const {
  std::vector<IntentPath> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(c.path);
  return out;
}

std::string_view to_string(TrajectoryLabelBranch b) { return kBranchNames[static_cast<int>(b)]; }

TrajectoryLabelBranch branch_from_string(std::string_view s) {
  for (int i = 0; i < 3; ++i)
    if (kBranchNames[i] == s) return static_cast<TrajectoryLabelBranch>(i);
  throw ParseError("unknown-branch", "unknown label branch: " + std::string(s));
}

void SynthesisConfig::validate() const {
  auto bad = [](const std::string& m) { throw UsageError("bad-config", m); };
  if (!(tau_high > 0.0 && tau_high <= 1.0)) bad("tau_high must lie in (0, 1]");
  if (!(tau_low >= 0.0 && tau_low < 1.0)) bad("tau_low must lie in [0, 1)");
  if (!(tau_low < tau_high)) bad("tau_low must be below tau_high");
  if (q_per_perspective < 1) bad("q_per_perspective must be positive");
  if (!(path_similarity_threshold > 0.0 && path_similarity_threshold <= 1.0))
    bad("path_similarity_threshold must lie in (0, 1]");
}

json to_json(const SynthesisConfig& c) {
  return {{"tau_high", c.tau_high},
          {"tau_low", c.tau_low},
          {"q_per_perspective", c.q_per_perspective},
          {"path_similarity_threshold", c.path_similarity_threshold},
          {"models",
           {{"tree", model_json(c.models.tree)},
            {"reason", model_json(c.models.reason)},
            {"verbalize", model_json(c.models.verbalize)},
            {"judge", model_json(c.models.judge)},
            {"embed", c.models.embed}}},
          {"reuse_matched_candidate", c.reuse_matched_candidate},
          {"perturb_all_in_perspective", c.perturb_all_in_perspective},
          {"ablations",
           {{"disable_intent_tree", c.ablations.disable_intent_tree},
            {"disable_sentence_type", c.ablations.disable_sentence_type},
            {"llm_generated_negatives", c.ablations.llm_generated_negatives}}},
          {"instruction_style", std::string(to_string(c.instruction_style))},
          {"seed", c.seed}};
}

SynthesisConfig config_from_json(const json& j, SynthesisConfig c) {
  if (!j.is_object()) throw UsageError("bad-config", "config must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = *it;
      if (k == "tau_high") c.tau_high = v.get<double>();
      else if (k == "tau_low") c.tau_low = v.get<double>();
      else if (k == "q_per_perspective") c.q_per_perspective = v.get<int>();
      else if (k == "path_similarity_threshold") c.path_similarity_threshold = v.get<double>();
      else if (k == "reuse_matched_candidate") c.reuse_matched_candidate = v.get<bool>();
      else if (k == "perturb_all_in_perspective") c.perturb_all_in_perspective = v.get<bool>();
      else if (k == "instruction_style") c.instruction_style = instruction_style_from_string(v.get<std::string>());
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "models") {
        for (auto m = v.begin(); m != v.end(); ++m) {
          if (m.key() == "tree") model_from_json(*m, c.models.tree);
          else if (m.key() == "reason") model_from_json(*m, c.models.reason);
          else if (m.key() == "verbalize") model_from_json(*m, c.models.verbalize);
          else if (m.key() == "judge") model_from_json(*m, c.models.judge);
          else if (m.key() == "embed") c.models.embed = m->get<std::string>();
          else throw UsageError("bad-config", "unknown model role: " + m.key());
        }
      } else if (k == "ablations") {
        for (auto a = v.begin(); a != v.end(); ++a) {
          if (a.key() == "disable_intent_tree") c.ablations.disable_intent_tree = a->get<bool>();
          else if (a.key() == "disable_sentence_type") c.ablations.disable_sentence_type = a->get<bool>();
          else if (a.key() == "llm_generated_negatives") c.ablations.llm_generated_negatives = a->get<bool>();
          else throw UsageError("bad-config", "unknown ablation: " + a.key());
        }
      } else {
        throw UsageError("bad-config", "unknown config key: " + k);
      }
    }
  } catch (const json::exception& e) {
    throw UsageError("bad-config", std::string("config value has the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_digest(const SynthesisConfig& c) { return llm::sha256_hex(to_json(c).dump()); }

// ---------------------------------------------------------------------------

SentenceType classify_sentence_type(std::string_view utterance, Language language) {
  if (text::trim(utterance).empty()) throw UsageError("empty-utterance", "cannot classify an empty utterance");
  return language == Language::zh ? classify_zh(utterance) : classify_en(utterance);
}

SentenceTypePair sentence_type_pair(const SynthesisEnv& env, const DialogueContext& context,
                                    SentenceType gt_type, Rng& rng) {
  std::vector<SentenceType> others;
  for (SentenceType t : kSentenceTypes)
    if (t != gt_type) others.push_back(t);
  const SentenceType rejected = others[rng.uniform_index(others.size())];

  const PromptVars vars{{"dialogue", render_context(context.turns)}};
  auto reason = [&](SentenceType t) {
    const TemplateId id = sentence_type_template(t);
    auto messages = env.prompts.render(id, env.config.instruction_style, vars);
    return chat_parsed(env.gateway, env.config.models.reason.request(std::move(messages), std::string(template_name(id))),
                       [t](const std::string& out) {
                         std::string r = text::trim(out);
                         if (r.empty()) throw ParseError("empty-output", "empty sentence type analysis");
                         const SentenceType got = parse_sentence_type_label(r);
                         if (got != t)
                           throw ParseError("sentence-type-mismatch", "analysis concludes " +
                                                                          std::string(analysis_label(got)) +
                                                                          ", expected " +
                                                                          std::string(analysis_label(t)));
                         return r;
                       });
  };
  SentenceTypePair pair;
  pair.chosen_type = gt_type;
  pair.chosen_reasoning = reason(gt_type);
  pair.rejected_type = rejected;
  pair.rejected_reasoning = reason(rejected);
  return pair;
}

std::string introduced_topic(const IntentPath& path, const IntentTree& tree_prefix) {
  const IntentNode* anchor = find_topic(tree_prefix, path.topic);
  if (!anchor || !path.attribute) return path.topic;
  const std::string attr = text::normalize(*path.attribute);
  if (tree_prefix.has_topic(*path.attribute)) return path.topic;
  for (const auto& child : anchor->children)
    if (text::normalize(child.label) == attr) return path.topic;
  return *path.attribute;
}

bool fits_perspective(const IntentPath& path, Perspective perspective, const IntentTree& tree_prefix) {
  if (perspective == Perspective::exploitation) return tree_prefix.has_topic(path.topic);
  return !tree_prefix.has_topic(introduced_topic(path, tree_prefix));
}

void check_perspective(const PathReasoning& reasoning, const IntentTree& tree_prefix) {
  for (std::size_t i = 0; i < reasoning.candidates.size(); ++i) {
    const auto& p = reasoning.candidates[i].path;
    if (!fits_perspective(p, reasoning.perspective, tree_prefix))
      throw ParseError("perspective-violation",
                       "candidate " + std::to_string(i) + " (" + render_path(p) + ") is not a valid " +
                           std::string(to_string(reasoning.perspective)) + " path");
  }
}

std::pair<PathReasoning, PathReasoning> path_reason(const SynthesisEnv& env, const DialogueContext& context,
                                                    const IntentTree& tree_prefix,
                                                    std::string_view sentence_reasoning) {
  const auto& cfg = env.config;
  const auto q = static_cast<std::size_t>(cfg.q_per_perspective);
  const PromptVars vars{{"dialogue", render_context(context.turns)},
                        {"tree", tree_var(env, tree_prefix)},
                        {"sentence_reasoning", std::string(sentence_reasoning)},
                        {"q", std::to_string(q)}};
  auto one = [&](Perspective p) {
    const TemplateId id = path_reason_template(p);
    auto messages = env.prompts.render(id, cfg.instruction_style, vars);
    return chat_parsed(env.gateway, cfg.models.reason.request(std::move(messages), std::string(template_name(id))),
                       [&](const std::string& out) {
                         const std::string trimmed = text::trim(out);
                         auto parsed = parse_path_candidates(trimmed, q);
                         PathReasoning r{p, std::move(parsed.reasoning_text), std::move(parsed.candidates)};
                         for (auto& c : r.candidates) c.path.turn_introduced = context.k + 1;
                         if (!cfg.ablations.disable_intent_tree) check_perspective(r, tree_prefix);
                         return r;
                       });
  };
  PathReasoning exploit = one(Perspective::exploitation);
  PathReasoning explore = one(Perspective::exploration);
  return {std::move(exploit), std::move(explore)};
}

void guard_prompt(const std::vector<llm::ChatMessage>& messages, std::string_view guard_text) {
  if (text::trim(guard_text).empty()) return;
  for (const auto& m : messages)
    if (text::contains_normalized(m.content, guard_text))
      throw Error("leakage", "prompt would contain the ground-truth utterance");
}

std::vector<std::string> verbalize_candidates(const SynthesisEnv& env, const DialogueContext& context,
                                              const std::vector<IntentPath>& paths, VerbalizeMode mode,
                                              std::string_view sentence_reasoning, std::string_view guard_text) {
  if (paths.empty()) throw UsageError("empty-candidates", "nothing to verbalize");
  const TemplateId id = mode == VerbalizeMode::plain ? TemplateId::verbalize : TemplateId::verbalize_approx;
  const PromptVars vars{{"dialogue", render_context(context.turns)},
                        {"sentence_reasoning", std::string(sentence_reasoning)},
                        {"paths", render_path_list(paths)},
                        {"count", std::to_string(paths.size())}};
  auto messages = env.prompts.render(id, env.config.instruction_style, vars);
  guard_prompt(messages, guard_text);
  return chat_parsed(env.gateway,
                     env.config.models.verbalize.request(std::move(messages), std::string(template_name(id))),
                     [&](const std::string& out) { return parse_numbered_utterances(out, paths.size()); });
}

double judge_score(llm::Gateway& gateway, const PromptRegistry& prompts, const llm::ModelParams& judge,
                   const DialogueContext& context, std::string_view gt_utterance, std::string_view candidate) {
  const PromptVars vars{{"dialogue", render_context(context.turns)},
                        {"ground_truth", std::string(gt_utterance)},
                        {"candidate", std::string(candidate)}};
  auto messages = prompts.render(TemplateId::judge_pointwise, InstructionStyle::structured, vars);
  return chat_parsed(gateway, judge.request(std::move(messages), "judge_pointwise"),
                     [](const std::string& out) { return parse_judge_score(out); });
}

std::pair<double, std::size_t> judge_max(const SynthesisEnv& env, const DialogueContext& context,
                                         std::string_view gt_utterance,
                                         const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw UsageError("empty-candidates", "judge_max needs at least one candidate");
  double best = -1.0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double s =
        judge_score(env.gateway, env.prompts, env.config.models.judge, context, gt_utterance, candidates[i]);
    if (s > best) {
      best = s;
      arg = i;
    }
  }
  return {best, arg};
}

TrajectoryLabelBranch label_branch(double j_max, double tau_high, double tau_low) {
  if (!(tau_low < tau_high)) throw UsageError("bad-thresholds", "tau_low must be below tau_high");
  if (j_max >= tau_high) return TrajectoryLabelBranch::preferred_direct;
  if (j_max <= tau_low) return TrajectoryLabelBranch::nonpreferred_direct;
  return TrajectoryLabelBranch::uncertain;
}

Perspective classify_gt_perspective(const IntentTree& tree_prefix, const std::vector<IntentPath>& gt_paths) {
  if (gt_paths.empty()) throw UsageError("empty-gt-paths", "ground-truth path set is empty");
  for (const auto& p : gt_paths)
    if (!tree_prefix.has_topic(p.topic)) return Perspective::exploration;
  return Perspective::exploitation;
}

std::optional<FuturePath> sample_future_path(const PerTurnPaths& per_turn_paths, int k, int n, Rng& rng) {
  std::vector<int> valid;
  for (int eps = 2; eps <= n - k; ++eps) {
    auto it = per_turn_paths.find(k + eps);
    if (it != per_turn_paths.end() && !it->second.empty()) valid.push_back(eps);
  }
  if (valid.empty()) return std::nullopt;
  const int eps = valid[rng.uniform_index(valid.size())];
  return FuturePath{per_turn_paths.at(k + eps), eps};
}

PathReasoning revise_reasoning(const PathReasoning& reasoning, const std::vector<IntentPath>& gt_paths,
                               std::optional<std::size_t> argmax_in_reasoning, llm::Embedder& embedder) {
  if (reasoning.candidates.empty())
    throw Error("no-candidate-in-perspective", "no " + std::string(to_string(reasoning.perspective)) +
                                                   " candidate to revise");
  if (gt_paths.empty()) throw UsageError("empty-gt-paths", "ground-truth path set is empty");

  PathReasoning out = reasoning;
  const std::size_t n = out.candidates.size();
  std::vector<bool> taken(n, false);
  std::vector<IntentPath> pending;
  // A ground-truth path already present among the candidates stays where it is.
  for (const auto& gt : gt_paths) {
    bool placed = false;
    for (std::size_t i = 0; i < n && !placed; ++i) {
      if (!taken[i] && path_key(out.candidates[i].path) == path_key(gt)) {
        out.candidates[i].path = gt;
        taken[i] = true;
        placed = true;
      }
    }
    if (!placed) pending.push_back(gt);
  }
  if (pending.empty()) return out;

  const auto sims = similarities(out.candidates, gt_paths, embedder);
  std::vector<std::size_t> order;
  if (argmax_in_reasoning && *argmax_in_reasoning < n) order.push_back(*argmax_in_reasoning);
  for (std::size_t i : by_similarity(sims))
    if (std::find(order.begin(), order.end(), i) == order.end()) order.push_back(i);

  std::size_t next = 0;
  for (const auto& gt : pending) {
    while (next < order.size() && taken[order[next]]) ++next;
    if (next == order.size()) break;
    put_path(out, order[next], gt);
    taken[order[next]] = true;
  }
  return out;
}

PerturbResult perturb_reasoning(const SynthesisEnv& env, const PathReasoning& reasoning,
                                const std::optional<FuturePath>& future, const std::vector<IntentPath>& gt_paths,
                                std::string_view gt_utterance, const DialogueContext& context,
                                const IntentTree& tree_prefix) {
  const auto& cfg = env.config;
  if (reasoning.candidates.empty())
    throw Error("no-candidate-in-perspective", "no " + std::string(to_string(reasoning.perspective)) +
                                                   " candidate to perturb");
  const auto sims = similarities(reasoning.candidates, gt_paths, env.embedder);
  std::vector<std::size_t> targets = by_similarity(sims);
  if (cfg.perturb_all_in_perspective) std::sort(targets.begin(), targets.end());  // every slot, in text order
  else targets.resize(1);

  PerturbResult result{reasoning, std::nullopt};
  std::vector<IntentPath> replacements;
  auto seen = [&](const IntentPath& p) {
    for (const auto& r : replacements)
      if (path_key(r) == path_key(p)) return true;
    return false;
  };

  if (future && !cfg.ablations.llm_generated_negatives) {
    for (const auto& f : future->paths) {
      if (replacements.size() == targets.size()) break;
      if (seen(f)) continue;
      if (path_set_similarity({f}, gt_paths, env.embedder) >= cfg.path_similarity_threshold) continue;
      if (!cfg.ablations.disable_intent_tree && !fits_perspective(f, reasoning.perspective, tree_prefix)) continue;
      replacements.push_back(f);
    }
    if (!replacements.empty()) result.epsilon = future->epsilon;
  }

  if (replacements.size() < targets.size()) {
    std::vector<IntentPath> exclude = gt_paths;
    exclude.insert(exclude.end(), replacements.begin(), replacements.end());
    for (std::size_t i = 0; i < reasoning.candidates.size(); ++i)
      if (std::find(targets.begin(), targets.end(), i) == targets.end())
        exclude.push_back(reasoning.candidates[i].path);
    auto alts = alternative_paths(env, context, tree_prefix, gt_paths, gt_utterance, reasoning.perspective,
                                  targets.size() - replacements.size(), exclude);
    replacements.insert(replacements.end(), alts.begin(), alts.end());
  }

  for (std::size_t i = 0; i < targets.size(); ++i) put_path(result.reasoning, targets[i], replacements[i]);
  return result;
}

// ---------------------------------------------------------------------------

void validate_record(const PreferenceRecord& r, double tau_high) {
  auto fail = [&](const std::string& m) {
    throw Error("invalid-record", r.dialogue_id + " K=" + std::to_string(r.k) + ": " + m);
  };
  const Perspective gp = r.gt_perspective;
  const bool differ = r.chosen.sentence_reasoning != r.rejected.sentence_reasoning ||
                      r.chosen.side(gp) != r.rejected.side(gp) || r.chosen.responses != r.rejected.responses;
  if (!differ) fail("chosen and rejected are identical");

  const Perspective other = gp == Perspective::exploitation ? Perspective::exploration : Perspective::exploitation;
  if (r.chosen.side(other).reasoning_text != r.rejected.side(other).reasoning_text)
    fail("reasoning outside the ground-truth perspective differs between chosen and rejected");

  const std::string gt = text::normalize(r.gt_utterance);
  auto check = [&](const std::string& field, const std::string& where, bool exempt) {
    if (!text::contains_normalized(field, r.gt_utterance)) return;
    if (exempt && text::normalize(field) == gt) return;
    fail(where + " contains the ground-truth utterance");
  };
  for (const Trajectory* t : {&r.chosen, &r.rejected}) {
    const std::string side = t == &r.chosen ? "chosen" : "rejected";
    check(t->sentence_reasoning, side + " sentence reasoning", false);
    check(t->exploit.reasoning_text, side + " exploitation reasoning", false);
    check(t->explore.reasoning_text, side + " exploration reasoning", false);
    for (const auto& resp : t->responses)
      check(resp, side + " response", t == &r.chosen && r.j_max >= tau_high);
  }
  if (r.epsilon && *r.epsilon < 2) fail("epsilon below 2");
}

namespace {

PreferenceRecord synthesize_turn(const SynthesisEnv& env, const Dialogue& d, const IntentTree& tree,
                                 const PerTurnPaths& per_turn, int k, const Provenance& provenance,
                                 std::string& stage) {
  const auto& cfg = env.config;
  const int n = d.turn_count();
  const auto q = static_cast<std::size_t>(cfg.q_per_perspective);

  stage = "prefix";
  DialogueContext ctx = prefix(d, k);
  const IntentTree tk = prefix_tree(tree, k);

  stage = "gt_next";
  auto [gt_u, gt_paths] = gt_next(d, per_turn, k);

  PreferenceRecord rec;
  rec.dialogue_id = d.id;
  rec.k = k;
  rec.context = ctx;
  if (!cfg.ablations.disable_intent_tree) rec.tree_prefix = tk;
  rec.gt_utterance = gt_u;
  rec.gt_paths = gt_paths;
  rec.seed = derive_seed(cfg.seed, d.id, static_cast<std::uint64_t>(k));
  rec.provenance = provenance;
  Rng rng(rec.seed);

  SentenceTypePair stp;
  const bool use_types = !cfg.ablations.disable_sentence_type;
  if (use_types) {
    stage = "sentence_type";
    stp = sentence_type_pair(env, ctx, classify_sentence_type(gt_u, d.language), rng);
  }

  stage = "path_reason";
  auto [rx, re] = path_reason(env, ctx, tk, stp.chosen_reasoning);

  stage = "verbalize";
  const auto direct = verbalize_candidates(env, ctx, concat(rx.paths(), re.paths()), VerbalizeMode::plain,
                                           stp.chosen_reasoning);

  stage = "judge";
  const auto [jmax, arg] = judge_max(env, ctx, gt_u, direct);
  rec.j_max = jmax;
  rec.branch = label_branch(jmax, cfg.tau_high, cfg.tau_low);
  rec.gt_perspective = classify_gt_perspective(tk, gt_paths);

  const Perspective gp = rec.gt_perspective;
  const PathReasoning& gt_side = gp == Perspective::exploitation ? rx : re;
  std::optional<std::size_t> local_arg;
  if (gp == Perspective::exploitation && arg < q) local_arg = arg;
  if (gp == Perspective::exploration && arg >= q) local_arg = arg - q;

  Trajectory& chosen = rec.chosen;
  Trajectory& rejected = rec.rejected;
  chosen.exploit = rejected.exploit = rx;
  chosen.explore = rejected.explore = re;
  if (use_types) {
    chosen.sentence_type = stp.chosen_type;
    rejected.sentence_type = stp.rejected_type;
  }
  chosen.sentence_reasoning = stp.chosen_reasoning;
  rejected.sentence_reasoning = stp.rejected_reasoning;

  auto all_paths = [](const Trajectory& t) { return concat(t.exploit.paths(), t.explore.paths()); };
  auto approx = [&](const Trajectory& t) {
    stage = "verbalize_approx";
    return verbalize_candidates(env, ctx, all_paths(t), VerbalizeMode::approximate, t.sentence_reasoning, gt_u);
  };
  auto perturb = [&]() {
    stage = "future_path";
    std::optional<FuturePath> future;
    if (!cfg.ablations.llm_generated_negatives) future = sample_future_path(per_turn, k, n, rng);
    stage = "perturb";
    auto pr = perturb_reasoning(env, gt_side, future, gt_paths, gt_u, ctx, tk);
    rejected.side(gp) = std::move(pr.reasoning);
    rec.epsilon = pr.epsilon;
    stage = "verbalize_rejected";
    rejected.responses = verbalize_candidates(env, ctx, all_paths(rejected), VerbalizeMode::plain,
                                              rejected.sentence_reasoning);
  };
  auto revise = [&]() {
    stage = "revise";
    chosen.side(gp) = revise_reasoning(gt_side, gt_paths, local_arg, env.embedder);
    chosen.responses = approx(chosen);
  };

  switch (rec.branch) {
    case TrajectoryLabelBranch::preferred_direct:
      chosen.responses = cfg.reuse_matched_candidate ? direct : approx(chosen);
      perturb();
      break;
    case TrajectoryLabelBranch::nonpreferred_direct:
      rejected.responses = direct;
      revise();
      break;
    case TrajectoryLabelBranch::uncertain:
      revise();
      perturb();
      break;
  }

  stage = "validate";
  validate_record(rec, cfg.tau_high);
  if (rec.epsilon && *rec.epsilon > n - k)
    throw Error("invalid-record", d.id + " K=" + std::to_string(k) + ": epsilon beyond N-K");
  return rec;
}

Provenance make_provenance(const SynthesisEnv& env) {
  const auto& cfg = env.config;
  Provenance p;
  p.models = {{"tree", cfg.models.tree.model_id},
              {"reason", cfg.models.reason.model_id},
              {"verbalize", cfg.models.verbalize.model_id},
              {"judge", cfg.models.judge.model_id},
              {"embed", cfg.models.embed}};
  p.templates = env.prompts.versions();
  p.config_digest = config_digest(cfg);
  p.instruction_style = cfg.instruction_style;
  p.tree_ablated = cfg.ablations.disable_intent_tree;
  return p;
}

}  // namespace

DialogueResult synthesize_dialogue(const SynthesisEnv& env, const Dialogue& dialogue) {
  DialogueResult out;
  auto fail = [&](int k, const std::string& stage, const std::string& kind, const std::string& msg) {
    spdlog::warn("synthesis failed: dialogue={} K={} stage={} kind={}: {}", dialogue.id, k, stage, kind, msg);
    out.failures.push_back({dialogue.id, k, stage, kind, msg});
  };
  if (!dialogue.eligible()) {
    fail(0, "eligibility", "ineligible", "dialogue has fewer than two turns");
    return out;
  }

  IntentTree tree;
  PerTurnPaths per_turn;
  try {
    tree = build_intent_tree(dialogue, env.gateway, env.prompts, env.config.models.tree);
    validate_tree(tree, dialogue.turn_count());
    per_turn = extract_new_paths(tree);
  } catch (const Error& e) {
    fail(0, "tree_build", e.kind(), e.what());
    return out;
  } catch (const std::exception& e) {
    fail(0, "tree_build", "internal", e.what());
    return out;
  }

  const Provenance provenance = make_provenance(env);
  for (int k = 1; k < dialogue.turn_count(); ++k) {
    std::string stage = "start";
    try {
      out.records.push_back(synthesize_turn(env, dialogue, tree, per_turn, k, provenance, stage));
    } catch (const Error& e) {
      fail(k, stage, e.kind(), e.what());
    } catch (const std::exception& e) {
      fail(k, stage, "internal", e.what());
    }
  }
  return out;
}

json to_json(const RunReport& r) {
  json failures = json::array();
  for (const auto& f : r.failures)
    failures.push_back(
        {{"dialogue_id", f.dialogue_id}, {"k", f.k}, {"stage", f.stage}, {"kind", f.kind}, {"message", f.message}});
  return {{"dialogues", r.dialogues},
          {"records", r.records},
          {"branches", r.branches},
          {"perspectives", r.perspectives},
          {"failures_by_stage", r.failures_by_stage},
          {"failures", failures},
          {"future_path_perturbations", r.future_path_perturbations},
          {"fallback_perturbations", r.fallback_perturbations},
          {"usage", {{"prompt_tokens", r.prompt_tokens}, {"completion_tokens", r.completion_tokens}}}};
}

std::pair<std::vector<PreferenceRecord>, RunReport> synthesize_corpus(const std::vector<Dialogue>& dialogues,
                                                                      const SynthesisConfig& config,
                                                                      llm::Gateway& gateway,
                                                                      const PromptRegistry& prompts, int workers) {
  config.validate();
  RunReport report;
  for (auto b : kBranchNames) report.branches[std::string(b)] = 0;
  report.perspectives = {{"exploitation", 0}, {"exploration", 0}};
  report.dialogues = dialogues.size();

  const auto before = gateway.stats();
  std::vector<DialogueResult> results(dialogues.size());
  auto embedder = gateway.embedder(config.models.embed);
  const SynthesisEnv env{gateway, prompts, config, *embedder};

  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t i = next++; i < dialogues.size(); i = next++) results[i] = synthesize_dialogue(env, dialogues[i]);
  };
  const int w = std::clamp(workers, 1, static_cast<int>(std::max<std::size_t>(dialogues.size(), 1)));
  if (w == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < w; ++i) pool.emplace_back(work);
  }

  std::vector<PreferenceRecord> records;
  for (auto& res : results) {
    for (auto& rec : res.records) {
      report.branches[std::string(to_string(rec.branch))]++;
      report.perspectives[std::string(to_string(rec.gt_perspective))]++;
      if (rec.branch != TrajectoryLabelBranch::nonpreferred_direct) {
        if (rec.epsilon) report.future_path_perturbations++;
        else report.fallback_perturbations++;
      }
      records.push_back(std::move(rec));
    }
    for (auto& f : res.failures) {
      report.failures_by_stage[f.stage]++;
      report.failures.push_back(std::move(f));
    }
  }
  report.records = records.size();
  const auto after = gateway.stats();
  report.prompt_tokens = after.prompt_tokens - before.prompt_tokens;
  report.completion_tokens = after.completion_tokens - before.completion_tokens;
  return {std::move(records), std::move(report)};
}

}  // namespace proutt
