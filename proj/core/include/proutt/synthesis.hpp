#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "proutt/corpus.hpp"
#include "proutt/gateway.hpp"
#include "proutt/intent.hpp"
#include "proutt/promptkit.hpp"
#include "proutt/rng.hpp"
#include "proutt/sentence_type.hpp"

namespace proutt {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct SentenceTypePair {
  SentenceType chosen_type = SentenceType::declarative;
  std::string chosen_reasoning;
  SentenceType rejected_type = SentenceType::imperative;
  std::string rejected_reasoning;
};

/// Reasoning for one perspective with its delimited candidate paths.
struct PathReasoning {
  Perspective perspective = Perspective::exploitation;
  std::string reasoning_text;
  std::vector<CandidateSegment> candidates;

  std::vector<IntentPath> paths() const;
  friend bool operator==(const PathReasoning&, const PathReasoning&) = default;
};

enum class TrajectoryLabelBranch { preferred_direct, uncertain, nonpreferred_direct };
std::string_view to_string(TrajectoryLabelBranch b);
TrajectoryLabelBranch branch_from_string(std::string_view s);

/// One side (chosen or rejected) of a preference record.
struct Trajectory {
  std::optional<SentenceType> sentence_type;
  std::string sentence_reasoning;
  PathReasoning exploit{Perspective::exploitation, {}, {}};
  PathReasoning explore{Perspective::exploration, {}, {}};
  std::vector<std::string> responses;

  const PathReasoning& side(Perspective p) const {
    return p == Perspective::exploitation ? exploit : explore;
  }
  PathReasoning& side(Perspective p) { return p == Perspective::exploitation ? exploit : explore; }
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct Provenance {
  std::map<std::string, std::string> models;
  std::map<std::string, std::string> templates;
  std::string config_digest;
  InstructionStyle instruction_style = InstructionStyle::structured;
  bool tree_ablated = false;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct PreferenceRecord {
  std::string dialogue_id;
  int k = 1;
  DialogueContext context;
  IntentTree tree_prefix;
  std::string gt_utterance;
  std::vector<IntentPath> gt_paths;
  Trajectory chosen;
  Trajectory rejected;
  double j_max = 0.0;
  TrajectoryLabelBranch branch = TrajectoryLabelBranch::uncertain;
  Perspective gt_perspective = Perspective::exploitation;
  std::optional<int> epsilon;
  std::uint64_t seed = 0;
  Provenance provenance;

  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

struct RoleModels {
  llm::ModelParams tree{"", 0.8, 1.0, 2048};
  llm::ModelParams reason{"", 0.8, 1.0, 1024};
  llm::ModelParams verbalize{"", 0.8, 1.0, 512};
  llm::ModelParams judge{"", 0.0, 1.0, 256};
  std::string embed;
};

struct Ablations {
  bool disable_intent_tree = false;
  bool disable_sentence_type = false;
  bool llm_generated_negatives = false;
};

struct SynthesisConfig {
  double tau_high = 0.8;
  double tau_low = 0.3;
  int q_per_perspective = 2;
  double path_similarity_threshold = 0.85;
  RoleModels models;
  bool reuse_matched_candidate = true;
  bool perturb_all_in_perspective = false;
  Ablations ablations;
  InstructionStyle instruction_style = InstructionStyle::structured;
  std::uint64_t seed = 0;

  /// Throws UsageError("bad-config") when an invariant is broken.
  void validate() const;
};

nlohmann::json to_json(const SynthesisConfig& c);
/// Overlays the keys present in `j` onto `base`.
SynthesisConfig config_from_json(const nlohmann::json& j, SynthesisConfig base = {});
std::string config_digest(const SynthesisConfig& c);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Shared handles for one synthesis run.
struct SynthesisEnv {
  llm::Gateway& gateway;
  const PromptRegistry& prompts;
  const SynthesisConfig& config;
  llm::Embedder& embedder;
};

/// Rule-based sentence type of a user utterance.
SentenceType classify_sentence_type(std::string_view utterance, Language language);

SentenceTypePair sentence_type_pair(const SynthesisEnv& env, const DialogueContext& context,
                                    SentenceType gt_type, Rng& rng);

/// Exploitation and exploration reasoning with Q candidates each.
std::pair<PathReasoning, PathReasoning> path_reason(const SynthesisEnv& env,
                                                    const DialogueContext& context,
                                                    const IntentTree& tree_prefix,
                                                    std::string_view sentence_reasoning);

/// Throws Error("perspective-violation") unless every candidate of `reasoning`
/// is on its side of the tree.
void check_perspective(const PathReasoning& reasoning, const IntentTree& tree_prefix);

/// Topic a path introduces relative to the tree. Exploration paths may be
/// written anchored to an existing topic ("Anchor → NewTopic - Attr"); those
/// yield NewTopic.
std::string introduced_topic(const IntentPath& path, const IntentTree& tree_prefix);
bool fits_perspective(const IntentPath& path, Perspective perspective, const IntentTree& tree_prefix);

enum class VerbalizeMode { plain, approximate };

/// Throws Error("leakage") when any message contains `guard_text` as a
/// normalized substring. No-op for empty guard text.
void guard_prompt(const std::vector<llm::ChatMessage>& messages, std::string_view guard_text);

std::vector<std::string> verbalize_candidates(const SynthesisEnv& env, const DialogueContext& context,
                                              const std::vector<IntentPath>& paths, VerbalizeMode mode,
                                              std::string_view sentence_reasoning,
                                              std::string_view guard_text = {});

/// Pointwise judge score of one candidate, with one repair retry.
double judge_score(llm::Gateway& gateway, const PromptRegistry& prompts,
                   const llm::ModelParams& judge, const DialogueContext& context,
                   std::string_view gt_utterance, std::string_view candidate);

/// Maximum judge score and the first index attaining it.
std::pair<double, std::size_t> judge_max(const SynthesisEnv& env, const DialogueContext& context,
                                         std::string_view gt_utterance,
                                         const std::vector<std::string>& candidates);

TrajectoryLabelBranch label_branch(double j_max, double tau_high, double tau_low);

Perspective classify_gt_perspective(const IntentTree& tree_prefix, const std::vector<IntentPath>& gt_paths);

struct FuturePath {
  std::vector<IntentPath> paths;
  int epsilon = 2;
};

/// Turn k+epsilon with epsilon uniform over {2..n-k} restricted to turns with
/// annotated paths; nullopt when no such turn exists.
std::optional<FuturePath> sample_future_path(const PerTurnPaths& per_turn_paths, int k, int n, Rng& rng);

/// Splices the ground-truth path(s) over the argmax candidate (or, when the
/// argmax lies in the other perspective, the candidate closest to the ground
/// truth). Nothing outside the replaced segments changes.
PathReasoning revise_reasoning(const PathReasoning& reasoning, const std::vector<IntentPath>& gt_paths,
                               std::optional<std::size_t> argmax_in_reasoning, llm::Embedder& embedder);

struct PerturbResult {
  PathReasoning reasoning;
  std::optional<int> epsilon;  ///< set when a future path was spliced
};

/// Replaces the ground-truth-closest candidate (every candidate when
/// perturb_all_in_perspective is set) with a future path, falling back to an
/// LLM-proposed alternative when the future path is missing or too similar to
/// the ground truth.
PerturbResult perturb_reasoning(const SynthesisEnv& env, const PathReasoning& reasoning,
                                const std::optional<FuturePath>& future,
                                const std::vector<IntentPath>& gt_paths, std::string_view gt_utterance,
                                const DialogueContext& context, const IntentTree& tree_prefix);

struct SynthesisFailure {
  std::string dialogue_id;
  int k = 0;  ///< 0 for dialogue-level failures
  std::string stage;
  std::string kind;
  std::string message;
};

struct DialogueResult {
  std::vector<PreferenceRecord> records;
  std::vector<SynthesisFailure> failures;
};

/// One record per k in [1, N-1]; per-k failures are collected, not thrown.
DialogueResult synthesize_dialogue(const SynthesisEnv& env, const Dialogue& dialogue);

/// Checks the record-level invariants; throws Error("invalid-record").
void validate_record(const PreferenceRecord& record, double tau_high);

struct RunReport {
  std::size_t dialogues = 0;
  std::size_t records = 0;
  std::map<std::string, std::size_t> branches;
  std::map<std::string, std::size_t> perspectives;
  std::map<std::string, std::size_t> failures_by_stage;
  std::vector<SynthesisFailure> failures;
  std::size_t future_path_perturbations = 0;
  std::size_t fallback_perturbations = 0;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
};

nlohmann::json to_json(const RunReport& r);

/// Runs synthesize_dialogue over the corpus on up to `workers` threads.
/// Output order is (input index, k) whatever the scheduling.
std::pair<std::vector<PreferenceRecord>, RunReport> synthesize_corpus(
    const std::vector<Dialogue>& dialogues, const SynthesisConfig& config, llm::Gateway& gateway,
    const PromptRegistry& prompts, int workers = 1);

}  // namespace proutt
