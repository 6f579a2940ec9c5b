#include <doctest.h>

#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include "proutt/dataset.hpp"
#include "proutt/error.hpp"
#include "proutt/intent.hpp"
#include "proutt/promptkit.hpp"
#include "proutt/synthesis.hpp"
#include "proutt/text.hpp"
#include "story_example.hpp"
#include "embedders.hpp"
#include "records.hpp"
#include "scripted.hpp"

using namespace proutt;
using testing::HashEmbedder;
using testing::ScriptedBackend;

namespace {

SynthesisConfig base_config() { return testing::scripted_config(); }

struct Rig {
  explicit Rig(std::vector<testing::ScriptedDialogue> corpus = {})
      : backend(std::make_shared<ScriptedBackend>(std::move(corpus))), gw({}, backend) {
    gw.set_observer([this](const llm::ChatRequest& req, const llm::ChatResponse&) {
      std::lock_guard lock(mu);
      std::string all;
      for (const auto& m : req.messages) all += m.content + "\n";
      prompts.emplace_back(req.request_tag, all);
    });
  }
  SynthesisEnv env() { return {gw, PromptRegistry::builtin(), cfg, emb}; }
  int count(std::string_view tag) {
    std::lock_guard lock(mu);
    int n = 0;
    for (const auto& [t, p] : prompts) n += t == tag;
    return n;
  }

  std::shared_ptr<ScriptedBackend> backend;
  llm::Gateway gw;
  SynthesisConfig cfg = base_config();
  HashEmbedder emb;
  std::mutex mu;
  std::vector<std::pair<std::string, std::string>> prompts;
};

std::string kind_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return "";
}

IntentPath P(std::string_view s) { return parse_path(s); }

std::vector<std::string> rendered(const std::vector<IntentPath>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(render_path(p));
  return out;
}

const IntentTree& story_tree() {
  static const IntentTree t = parse_tree_text(
      "StoryConversion@1 {\n    OriginalPOV@1: Third person,\n    TargetPOV@1: First person\n}");
  return t;
}

PathReasoning mining_reasoning() {
  auto parsed = parse_path_candidates(testing::kMiningAnalysis, 2);
  return {Perspective::exploitation, parsed.reasoning_text, parsed.candidates};
}

std::string section_line(const std::string& prompt, std::string_view head) {
  const auto at = prompt.find(head);
  if (at == std::string::npos) return {};
  const auto start = at + head.size();
  return prompt.substr(start, prompt.find('\n', start) - start);
}

}  // namespace

TEST_CASE("rule-based sentence types") {
  CHECK(classify_sentence_type("Why Rust use #[derive(Debug, Clone)]?", Language::en) == SentenceType::interrogative);
  CHECK(classify_sentence_type("Convert this to second person point of view.", Language::en) ==
        SentenceType::imperative);
  CHECK(classify_sentence_type("I want to know the author of this story.", Language::en) ==
        SentenceType::declarative);
  CHECK(classify_sentence_type("How do I sort a list", Language::en) == SentenceType::interrogative);
  CHECK(classify_sentence_type("Please, a shorter version", Language::en) == SentenceType::imperative);
  CHECK(classify_sentence_type("Can you help me with this", Language::en) == SentenceType::interrogative);
  CHECK(classify_sentence_type("The second paragraph feels slow.", Language::en) == SentenceType::declarative);
  CHECK(classify_sentence_type("北京明天天气怎么样", Language::zh) == SentenceType::interrogative);
  CHECK(classify_sentence_type("请帮我订一张去上海的票", Language::zh) == SentenceType::imperative);
  CHECK(classify_sentence_type("我想去上海玩两天。", Language::zh) == SentenceType::declarative);
  CHECK(kind_of([] { classify_sentence_type("  ", Language::en); }) == "empty-utterance");
}

TEST_CASE("label branch table") {
  CHECK(label_branch(0.8, 0.8, 0.3) == TrajectoryLabelBranch::preferred_direct);
  CHECK(label_branch(0.95, 0.8, 0.3) == TrajectoryLabelBranch::preferred_direct);
  CHECK(label_branch(0.79, 0.8, 0.3) == TrajectoryLabelBranch::uncertain);
  CHECK(label_branch(0.31, 0.8, 0.3) == TrajectoryLabelBranch::uncertain);
  CHECK(label_branch(0.3, 0.8, 0.3) == TrajectoryLabelBranch::nonpreferred_direct);
  CHECK(label_branch(0.0, 0.8, 0.3) == TrajectoryLabelBranch::nonpreferred_direct);
  for (int i = 0; i <= 100; ++i) CHECK_NOTHROW(label_branch(i / 100.0, 0.8, 0.3));
  CHECK(kind_of([] { label_branch(0.5, 0.3, 0.3); }) == "bad-thresholds");
  CHECK(kind_of([] { label_branch(0.5, 0.3, 0.8); }) == "bad-thresholds");
  for (auto b : {TrajectoryLabelBranch::preferred_direct, TrajectoryLabelBranch::uncertain,
                 TrajectoryLabelBranch::nonpreferred_direct})
    CHECK(branch_from_string(to_string(b)) == b);
}

TEST_CASE("sentence type pair draws the rejected type uniformly and deterministically") {
  auto corpus = testing::make_corpus(1, 3);
  Rig rig(corpus);
  const auto ctx = prefix(corpus[0].dialogue, 1);
  auto env = rig.env();

  Rng a(5), b(5);
  const auto pa = sentence_type_pair(env, ctx, SentenceType::imperative, a);
  const auto pb = sentence_type_pair(env, ctx, SentenceType::imperative, b);
  CHECK(pa.rejected_type == pb.rejected_type);
  CHECK(pa.chosen_reasoning == pb.chosen_reasoning);
  CHECK(pa.chosen_type == SentenceType::imperative);
  CHECK(pa.chosen_reasoning.find("most likely Instruction") != std::string::npos);

  Rng rng(2024);
  int declarative = 0;
  const int draws = 1000;
  for (int i = 0; i < draws; ++i) {
    const auto p = sentence_type_pair(env, ctx, SentenceType::imperative, rng);
    REQUIRE(p.rejected_type != SentenceType::imperative);
    declarative += p.rejected_type == SentenceType::declarative;
  }
  CHECK(std::abs(declarative / double(draws) - 0.5) <= 0.05);
}

TEST_CASE("story example sentence analyses parse to their labels") {
  CHECK(parse_sentence_type_label(testing::kChosenSentenceAnalysis) == SentenceType::imperative);
  CHECK(parse_sentence_type_label(testing::kRejectedSentenceAnalysis) == SentenceType::declarative);
}

TEST_CASE("path reasoning yields Q candidates per perspective") {
  auto corpus = testing::make_corpus(1, 4);
  Rig rig(corpus);
  const auto& d = corpus[0].dialogue;
  const auto tree = parse_tree_text(corpus[0].tree_text);
  const auto tk = prefix_tree(tree, 1);
  auto env = rig.env();
  auto [rx, re] = path_reason(env, prefix(d, 1), tk, "");
  CHECK(rx.candidates.size() == 2);
  CHECK(re.candidates.size() == 2);
  CHECK(rx.paths().size() + re.paths().size() == 4);
  for (const auto& p : rx.paths()) CHECK(fits_perspective(p, Perspective::exploitation, tk));
  for (const auto& p : re.paths()) CHECK(fits_perspective(p, Perspective::exploration, tk));
  for (const auto& c : rx.candidates) CHECK(c.path.turn_introduced == 2);

  rig.cfg.q_per_perspective = 3;
  auto [rx3, re3] = path_reason(rig.env(), prefix(d, 1), tk, "");
  CHECK(rx3.candidates.size() == 3);
  CHECK(re3.candidates.size() == 3);

  // An exploration candidate rooted at an existing topic fails after the repair retry.
  rig.cfg.q_per_perspective = 2;
  rig.backend->set_override([](std::string_view tag, const std::string&) -> std::optional<std::string> {
    if (tag.starts_with("path_reason.explore"))
      return "Maybe <<PATH>>Writing1 → Style - casual<</PATH>> or <<PATH>>Travel → Hotel - cheap<</PATH>>.";
    return std::nullopt;
  });
  CHECK(kind_of([&] { path_reason(rig.env(), prefix(d, 1), tk, ""); }) == "perspective-violation");
}

TEST_CASE("story example exploration paths anchored to the current topic count as new topics") {
  const auto& tree = story_tree();
  CHECK(introduced_topic(P("StoryConversion → StorySummarization - SummaryLength"), tree) == "StorySummarization");
  CHECK(fits_perspective(P("StoryConversion → StoryTranslation - TargetLanguage"), Perspective::exploration, tree));
  CHECK_FALSE(fits_perspective(P("StoryConversion → TargetPOV - Second person"), Perspective::exploration, tree));
  CHECK(fits_perspective(P("StoryConversion → OutputStyle - Formal"), Perspective::exploitation, tree));
  CHECK_FALSE(fits_perspective(P("Recipes → Dessert"), Perspective::exploitation, tree));
}

TEST_CASE("verbalization, leakage guard and empty input") {
  auto corpus = testing::make_corpus(1, 3);
  Rig rig(corpus);
  const auto ctx = prefix(corpus[0].dialogue, 1);
  auto env = rig.env();
  const std::vector<IntentPath> paths{P("Writing1 → Tone - warm"), P("Poems → Rhyme")};
  const auto out = verbalize_candidates(env, ctx, paths, VerbalizeMode::plain, "");
  REQUIRE(out.size() == 2);
  CHECK(out[0] == "Please work on Writing1 → Tone - warm now.");
  const auto approx = verbalize_candidates(env, ctx, paths, VerbalizeMode::approximate, "", "guard text");
  CHECK(approx[1].starts_with("Something along the lines of"));
  CHECK(kind_of([&] { verbalize_candidates(env, ctx, {}, VerbalizeMode::plain, ""); }) == "empty-candidates");
  const int before = rig.backend->calls;
  CHECK(kind_of([&] {
          verbalize_candidates(env, ctx, paths, VerbalizeMode::approximate, "", "Help me START draft 1 of my essay");
        }) == "leakage");
  CHECK(rig.backend->calls == before);
}

TEST_CASE("judge max picks the first highest score") {
  Rig rig;
  std::map<std::string, std::string> scores{{"c0", "0.2"}, {"c1", "0.9"}, {"c2", "0.4"}, {"c3", "0.1"},
                                            {"e0", "0.5"}, {"e1", "0.5"}, {"z", "0.0"}};
  rig.backend->set_override([&](std::string_view, const std::string& prompt) -> std::optional<std::string> {
    return "ok\nScore: " + scores.at(section_line(prompt, "Predicted next user input:\n"));
  });
  const DialogueContext ctx{"d", 1, {{1, "hello", "hi"}}};
  auto env = rig.env();
  CHECK(judge_max(env, ctx, "gt", {"c0", "c1", "c2", "c3"}) == std::pair<double, std::size_t>{0.9, 1});
  CHECK(judge_max(env, ctx, "gt", {"e0", "e1"}) == std::pair<double, std::size_t>{0.5, 0});
  CHECK(judge_max(env, ctx, "gt", {"z"}) == std::pair<double, std::size_t>{0.0, 0});
  CHECK(kind_of([&] { judge_max(env, ctx, "gt", {}); }) == "empty-candidates");
}

TEST_CASE("ground-truth perspective") {
  const auto& tree = story_tree();
  CHECK(classify_gt_perspective(tree, {P("StoryConversion → TargetPOV - Second person")}) ==
        Perspective::exploitation);
  CHECK(classify_gt_perspective(tree, {P("StoryConversion → TargetPOV - Second"), P("Poems → Rhyme")}) ==
        Perspective::exploration);
  CHECK(classify_gt_perspective(IntentTree{}, {P("Anything")}) == Perspective::exploration);
  CHECK(kind_of([&] { classify_gt_perspective(tree, {}); }) == "empty-gt-paths");
}

TEST_CASE("future path sampling") {
  PerTurnPaths per_turn{{2, {P("A → x")}}, {3, {P("A → y")}}, {4, {P("B → z")}}};
  Rng rng(1);
  std::set<int> seen;
  for (int i = 0; i < 200; ++i) {
    auto f = sample_future_path(per_turn, 1, 4, rng);
    REQUIRE(f);
    seen.insert(f->epsilon);
    CHECK(f->paths == per_turn.at(1 + f->epsilon));
  }
  CHECK(seen == std::set<int>{2, 3});
  CHECK_FALSE(sample_future_path(per_turn, 3, 4, rng));
  CHECK_FALSE(sample_future_path(per_turn, 2, 3, rng));

  // Turns without new paths are skipped.
  PerTurnPaths gaps{{2, {P("A → x")}}, {4, {}}, {5, {P("B → z")}}};
  for (int i = 0; i < 50; ++i) CHECK(sample_future_path(gaps, 1, 5, rng)->epsilon == 4);

  Rng r1(9), r2(9);
  for (int i = 0; i < 20; ++i)
    CHECK(sample_future_path(per_turn, 1, 4, r1)->epsilon == sample_future_path(per_turn, 1, 4, r2)->epsilon);

  Rng big(7);
  int two = 0;
  for (int i = 0; i < 10000; ++i) two += sample_future_path(per_turn, 1, 4, big)->epsilon == 2;
  CHECK(std::abs(two / 10000.0 - 0.5) <= 0.03);
}

TEST_CASE("revision splices the ground truth and nothing else") {
  HashEmbedder emb;
  const auto r = mining_reasoning();
  REQUIRE(r.candidates.size() == 2);

  // Already present: identity.
  CHECK(revise_reasoning(r, {P("StoryConversion → TargetPOV - Second person")}, 0, emb) == r);

  const auto rev = revise_reasoning(r, {P("StoryConversion → OutputStyle - Casual")}, 0, emb);
  CHECK(rev.candidates[0].path == P("StoryConversion → OutputStyle - Casual"));
  CHECK(rev.candidates[1].path == r.candidates[1].path);
  const auto& old_text = r.reasoning_text;
  const auto& new_text = rev.reasoning_text;
  CHECK(new_text.substr(0, r.candidates[0].begin) == old_text.substr(0, r.candidates[0].begin));
  CHECK(new_text.substr(rev.candidates[0].end) == old_text.substr(r.candidates[0].end));
  CHECK(new_text.find("OutputStyle - Casual") != std::string::npos);

  // No argmax on this side: the candidate closest to the ground truth is replaced.
  emb.fixed[render_path(r.candidates[0].path)] = {1, 0};
  emb.fixed[render_path(r.candidates[1].path)] = {0, 1};
  emb.fixed["StoryConversion → Voice - Plural"] = {0.1, 0.99};
  const auto near = revise_reasoning(r, {P("StoryConversion → Voice - Plural")}, std::nullopt, emb);
  CHECK(near.candidates[0].path == r.candidates[0].path);
  CHECK(near.candidates[1].path == P("StoryConversion → Voice - Plural"));

  CHECK(kind_of([&] { revise_reasoning(PathReasoning{}, {P("A")}, 0, emb); }) == "no-candidate-in-perspective");
}

TEST_CASE("perturbation uses the future path unless it matches the ground truth") {
  Rig rig;
  rig.backend->set_override(testing::story_reply);
  const auto story = testing::story_dialogue();
  const auto ctx = prefix(story, 1);
  const auto& tree = story_tree();
  const std::vector<IntentPath> gt{P("StoryConversion → TargetPOV - Second person")};
  const auto r = mining_reasoning();

  auto env = rig.env();
  const auto with_future =
      perturb_reasoning(env, r, FuturePath{{P("StoryConversion → Audience - Kids")}, 2}, gt, testing::kStoryGt, ctx, tree);
  CHECK(with_future.epsilon == 2);
  CHECK(with_future.reasoning.candidates[1].path == P("StoryConversion → Audience - Kids"));
  CHECK(with_future.reasoning.candidates[0].path == r.candidates[0].path);
  CHECK(rig.count("alternative_path") == 0);

  const auto fallback = perturb_reasoning(env, r, FuturePath{gt, 2}, gt, testing::kStoryGt, ctx, tree);
  CHECK_FALSE(fallback.epsilon);
  CHECK(rig.count("alternative_path") == 1);
  CHECK(render_path(fallback.reasoning.candidates[1].path) == "StoryConversion → AuthorName");

  const auto none = perturb_reasoning(env, r, std::nullopt, gt, testing::kStoryGt, ctx, tree);
  CHECK_FALSE(none.epsilon);

  // Alternatives that keep failing the checks surface as a fallback failure.
  rig.backend->set_override([](std::string_view tag, const std::string&) -> std::optional<std::string> {
    if (tag.starts_with("alternative_path")) return "<<PATH>>StoryConversion → TargetPOV - Second person<</PATH>>";
    return std::nullopt;
  });
  CHECK(kind_of([&] { perturb_reasoning(env, r, std::nullopt, gt, testing::kStoryGt, ctx, tree); }) ==
        "fallback-generation-failure");
}

TEST_CASE("story preference pair is reproduced") {
  Rig rig;
  rig.backend->set_override(testing::story_reply);
  rig.cfg.perturb_all_in_perspective = true;
  rig.cfg.seed = testing::story_seed();
  const auto result = synthesize_dialogue(rig.env(), testing::story_dialogue());
  REQUIRE(result.failures.empty());
  REQUIRE(result.records.size() == 1);
  const auto& rec = result.records[0];

  CHECK(rec.gt_utterance == testing::kStoryGt);
  CHECK(rec.j_max == doctest::Approx(0.9));
  CHECK(rec.branch == TrajectoryLabelBranch::preferred_direct);
  CHECK(rec.gt_perspective == Perspective::exploitation);
  CHECK_FALSE(rec.epsilon);

  CHECK(rec.chosen.sentence_type == SentenceType::imperative);
  CHECK(rec.chosen.sentence_reasoning == testing::kChosenSentenceAnalysis);
  CHECK(rec.rejected.sentence_type == SentenceType::declarative);
  CHECK(rec.rejected.sentence_reasoning == testing::kRejectedSentenceAnalysis);

  using S = std::vector<std::string>;
  CHECK(rendered(rec.chosen.exploit.paths()) ==
        S{"StoryConversion → OutputStyle - Formal", "StoryConversion → TargetPOV - Second person"});
  CHECK(rendered(rec.rejected.exploit.paths()) ==
        S{"StoryConversion → AuthorName", "StoryConversion → OriginalPOV - No person"});
  CHECK(rec.rejected.exploit.reasoning_text.find("StoryConversion → OriginalPOV - No person") != std::string::npos);
  CHECK(rec.chosen.explore == rec.rejected.explore);
  CHECK(rendered(rec.chosen.explore.paths()) ==
        S{"StoryConversion → StorySummarization - SummaryLength", "StoryConversion → StoryTranslation - TargetLanguage"});

  REQUIRE(rec.chosen.responses.size() == 4);
  CHECK(rec.chosen.responses[1] == "Convert the story to second person point of view.");
  REQUIRE(rec.rejected.responses.size() == 4);
  CHECK(rec.rejected.responses[0] == "I want to know the author of this story.");
  CHECK(rec.rejected.responses[2] == rec.chosen.responses[2]);
}

TEST_CASE("fixture corpus hits every branch and keeps record invariants") {
  auto corpus = testing::make_corpus(3, 4);
  Rig rig(corpus);
  std::map<TrajectoryLabelBranch, int> branches;
  for (const auto& s : corpus) {
    const auto res = synthesize_dialogue(rig.env(), s.dialogue);
    CHECK(res.failures.empty());
    REQUIRE(res.records.size() == 3);
    for (const auto& rec : res.records) {
      branches[rec.branch]++;
      CHECK_NOTHROW(validate_record(rec, rig.cfg.tau_high));
      CHECK(rec.gt_utterance == s.dialogue.turns[rec.k].user_utterance);
      CHECK(rec.context.turns.size() == static_cast<std::size_t>(rec.k));
      if (rec.epsilon) CHECK((*rec.epsilon >= 2 && *rec.epsilon <= 4 - rec.k));
      const Perspective other =
          rec.gt_perspective == Perspective::exploitation ? Perspective::exploration : Perspective::exploitation;
      CHECK(rec.chosen.side(other) == rec.rejected.side(other));
      switch (rec.branch) {
        case TrajectoryLabelBranch::preferred_direct:
          CHECK(rec.j_max >= 0.8);
          CHECK(rec.chosen.side(rec.gt_perspective) != rec.rejected.side(rec.gt_perspective));
          break;
        case TrajectoryLabelBranch::nonpreferred_direct: {
          CHECK(rec.j_max <= 0.3);
          CHECK_FALSE(rec.epsilon);
          const auto paths = rec.chosen.side(rec.gt_perspective).paths();
          for (const auto& g : rec.gt_paths)
            CHECK(std::find(paths.begin(), paths.end(), g) != paths.end());
          break;
        }
        case TrajectoryLabelBranch::uncertain:
          CHECK(rec.j_max > 0.3);
          CHECK(rec.j_max < 0.8);
          break;
      }
    }
  }
  CHECK(branches.size() == 3);
}

TEST_CASE("short, broken and empty inputs") {
  auto corpus = testing::make_corpus(2, 3);
  Rig rig(corpus);
  Dialogue one{"one", Language::en, Source::custom, {{1, "Hi there.", "Hello."}}};
  auto res = synthesize_dialogue(rig.env(), one);
  CHECK(res.records.empty());
  REQUIRE(res.failures.size() == 1);
  CHECK(res.failures[0].stage == "eligibility");

  rig.backend->set_override([](std::string_view tag, const std::string& prompt) -> std::optional<std::string> {
    if (tag.starts_with("tree") && prompt.find("draft 2 ") != std::string::npos) return "no tree here";
    return std::nullopt;
  });
  auto [records, report] = synthesize_corpus(testing::dialogues_of(corpus), rig.cfg, rig.gw, PromptRegistry::builtin());
  CHECK(records.size() == 2);
  CHECK(report.failures_by_stage.at("tree_build") == 1);
  CHECK(report.failures[0].dialogue_id == "fx-2");
  CHECK(report.records + report.failures.size() == 3);

  auto [none, empty] = synthesize_corpus({}, rig.cfg, rig.gw, PromptRegistry::builtin());
  CHECK(none.empty());
  CHECK(empty.records == 0);
  CHECK(empty.dialogues == 0);
}

TEST_CASE("corpus synthesis is deterministic across runs and worker counts") {
  auto corpus = testing::make_corpus(5, 4);
  auto run = [&](int workers) {
    Rig rig(corpus);
    auto [records, report] =
        synthesize_corpus(testing::dialogues_of(corpus), rig.cfg, rig.gw, PromptRegistry::builtin(), workers);
    CHECK(report.records == 15);
    CHECK(report.failures.empty());
    std::size_t by_branch = 0;
    for (const auto& [b, n] : report.branches) by_branch += n;
    CHECK(by_branch == report.records);
    CHECK(report.future_path_perturbations + report.fallback_perturbations ==
          report.records - report.branches.at("nonpreferred_direct"));
    CHECK(report.prompt_tokens > 0);
    return serialize_records(records);
  };
  const auto a = run(1);
  CHECK(a == run(1));
  CHECK(a == run(4));
}

TEST_CASE("ablations") {
  auto corpus = testing::make_corpus(3, 4);

  SUBCASE("no intent tree") {
    Rig rig(corpus);
    rig.cfg.ablations.disable_intent_tree = true;
    std::vector<PreferenceRecord> records;
    for (const auto& s : corpus) {
      auto res = synthesize_dialogue(rig.env(), s.dialogue);
      CHECK(res.failures.empty());
      records.insert(records.end(), res.records.begin(), res.records.end());
    }
    CHECK(records.size() == 9);
    for (const auto& rec : records) {
      CHECK(rec.tree_prefix.empty());
      CHECK(rec.provenance.tree_ablated);
      CHECK(record_to_json(rec).dump().find("Style") == std::string::npos);
    }
    for (const auto& [tag, prompt] : rig.prompts) {
      if (tag.starts_with("tree_")) continue;
      CHECK_MESSAGE(prompt.find("Style") == std::string::npos, tag);
    }
  }

  SUBCASE("no sentence types") {
    Rig rig(corpus);
    rig.cfg.ablations.disable_sentence_type = true;
    auto res = synthesize_dialogue(rig.env(), corpus[0].dialogue);
    CHECK(res.failures.empty());
    CHECK(res.records.size() == 3);
    for (const auto& rec : res.records) {
      CHECK(rec.chosen.sentence_reasoning.empty());
      CHECK(rec.rejected.sentence_reasoning.empty());
      CHECK_FALSE(rec.chosen.sentence_type);
      CHECK_FALSE(rec.rejected.sentence_type);
    }
    for (const auto& [tag, prompt] : rig.prompts) CHECK_FALSE(tag.starts_with("sentence_type"));
  }

  SUBCASE("generated negatives only") {
    Rig rig(corpus);
    rig.cfg.ablations.llm_generated_negatives = true;
    for (const auto& s : corpus)
      for (const auto& rec : synthesize_dialogue(rig.env(), s.dialogue).records) CHECK_FALSE(rec.epsilon);
  }
}

TEST_CASE("record validation rejects broken pairs") {
  auto corpus = testing::make_corpus(1, 3);
  Rig rig(corpus);
  const auto res = synthesize_dialogue(rig.env(), corpus[0].dialogue);
  REQUIRE(!res.records.empty());
  const auto good = res.records[0];
  const double th = rig.cfg.tau_high;

  auto same = good;
  same.rejected = same.chosen;
  CHECK(kind_of([&] { validate_record(same, th); }) == "invalid-record");

  auto cross = good;
  const Perspective other =
      good.gt_perspective == Perspective::exploitation ? Perspective::exploration : Perspective::exploitation;
  cross.rejected.side(other).reasoning_text += " extra";
  CHECK(kind_of([&] { validate_record(cross, th); }) == "invalid-record");

  auto leak = good;
  leak.chosen.side(good.gt_perspective).reasoning_text += " " + text::to_lower(good.gt_utterance);
  CHECK(kind_of([&] { validate_record(leak, th); }) == "invalid-record");

  auto exact = good;
  exact.chosen.responses[0] = good.gt_utterance;
  exact.j_max = 0.9;
  CHECK_NOTHROW(validate_record(exact, th));
  exact.j_max = 0.5;
  CHECK(kind_of([&] { validate_record(exact, th); }) == "invalid-record");

  auto eps = good;
  eps.epsilon = 1;
  CHECK(kind_of([&] { validate_record(eps, th); }) == "invalid-record");
}

TEST_CASE("config json round trip and validation") {
  auto c = base_config();
  c.tau_high = 0.75;
  c.ablations.disable_sentence_type = true;
  c.instruction_style = InstructionStyle::minimal;
  const auto back = config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(config_digest(back) == config_digest(c));
  CHECK(config_digest(base_config()) != config_digest(c));

  const auto partial = config_from_json(nlohmann::json{{"tau_low", 0.2}, {"models", {{"judge", {{"model_id", "j"}}}}}});
  CHECK(partial.tau_low == 0.2);
  CHECK(partial.tau_high == 0.8);
  CHECK(partial.models.judge.model_id == "j");

  CHECK(kind_of([] { config_from_json(nlohmann::json{{"tau_hi", 0.9}}); }) == "bad-config");
  CHECK(kind_of([] { config_from_json(nlohmann::json{{"tau_high", "high"}}); }) == "bad-config");
  CHECK(kind_of([] { config_from_json(nlohmann::json{{"ablations", {{"no_judge", true}}}}); }) == "bad-config");

  auto bad = base_config();
  bad.tau_low = 0.8;
  CHECK(kind_of([&] { bad.validate(); }) == "bad-config");
  bad = base_config();
  bad.q_per_perspective = 0;
  CHECK(kind_of([&] { bad.validate(); }) == "bad-config");
  CHECK_NOTHROW(base_config().validate());
}
