#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "proutt/corpus.hpp"
#include "proutt/gateway.hpp"
#include "proutt/promptkit.hpp"
#include "proutt/rng.hpp"

namespace proutt::eval {

/// Outcome for the first system of a comparison.
enum class Outcome { win, tie, loss };
std::string_view to_string(Outcome o);
Outcome outcome_from_string(std::string_view s);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// ---------------------------------------------------------------------------
// Judging
// ---------------------------------------------------------------------------

/// Best pointwise judge score over 1..8 candidates, each judged once.
double pointwise_best_of(llm::Gateway& gateway, const PromptRegistry& prompts, const llm::ModelParams& judge,
                         const DialogueContext& context, const std::vector<std::string>& candidates,
                         std::string_view gt);

/// Largest cosine between the ground truth and any candidate.
double embed_best_of(const std::vector<std::string>& candidates, std::string_view gt, llm::Embedder& embedder);

struct SwapRecord {
  std::string item_id;
  bool swapped = false;  ///< system A was shown as "B"
  Verdict raw = Verdict::tie;
  Outcome outcome = Outcome::tie;
};

/// Random side assignment, judge verdict mapped back to system A.
Outcome pairwise_compare(llm::Gateway& gateway, const PromptRegistry& prompts, const llm::ModelParams& judge,
                         const DialogueContext& context, std::string_view pred_a, std::string_view pred_b,
                         std::string_view gt, Rng& rng, SwapRecord* audit = nullptr);

// ---------------------------------------------------------------------------
// Agreement statistics
// ---------------------------------------------------------------------------

/// Fraction of equal positions. Throws UsageError("length-mismatch") or
/// UsageError("empty-input").
double agreement_rate(const std::vector<Outcome>& a, const std::vector<Outcome>& b);

/// (p_o - p_e) / (1 - p_e) with marginal-product p_e; 1.0 when p_o = 1.
double cohen_kappa(const std::vector<Outcome>& a, const std::vector<Outcome>& b);

Interval wilson_ci(std::size_t successes, std::size_t n, double z = 1.96);

using Confusion = std::array<std::array<std::size_t, 3>, 3>;

struct ConsistencyReport {
  std::size_t n = 0;
  double agreement = 0.0;
  Interval agreement_ci;
  double kappa = 0.0;
  Interval kappa_ci;
  Confusion confusion{};  ///< rows: human, columns: LLM; order win, tie, loss
};

/// Wilson CI for agreement; percentile bootstrap CI for κ.
ConsistencyReport consistency_report(const std::vector<Outcome>& human, const std::vector<Outcome>& llm,
                                     std::uint64_t seed = 0, int resamples = 1000);

nlohmann::json to_json(const ConsistencyReport& r);

// ---------------------------------------------------------------------------
// Batch evaluation
// ---------------------------------------------------------------------------

struct TestItem {
  std::string id;
  std::vector<DialogueTurn> context;
  std::string gt;
};

struct Prediction {
  std::string id;
  std::vector<std::string> candidates;
};

/// JSONL {id, context: [{user, assistant}], gt}.
std::vector<TestItem> load_test_set(const std::filesystem::path& path);
/// JSONL {id, candidates: [...]}.
std::vector<Prediction> load_predictions(const std::filesystem::path& path);

struct PointwiseOptions {
  llm::ModelParams judge{"", 0.0, 1.0, 256};
  std::string embed_model;
  int repeats = 5;
  int workers = 1;
};

struct PointwiseResult {
  std::vector<std::string> ids;
  std::vector<double> best_scores;  ///< per item, averaged over repeats
  std::vector<double> embed_sims;
  int repeats = 1;
  double llm_judge_mean = 0.0;  ///< ×100
  Interval llm_judge_ci;
  double embed_mean = 0.0;  ///< ×100
  Interval embed_ci;
};

/// Every test item needs a prediction with the same id.
PointwiseResult evaluate_pointwise(const std::vector<TestItem>& test, const std::vector<Prediction>& predictions,
                                   llm::Gateway& gateway, const PromptRegistry& prompts,
                                   const PointwiseOptions& options);

struct PairwiseResult {
  std::size_t win = 0;
  std::size_t tie = 0;
  std::size_t loss = 0;
  std::vector<SwapRecord> audit;
  std::vector<Outcome> outcomes;
};

/// Compares each system's first candidate per item. Side assignment for item
/// i is seeded by (seed, item id).
PairwiseResult evaluate_pairwise(const std::vector<TestItem>& test, const std::vector<Prediction>& system_a,
                                 const std::vector<Prediction>& system_b, llm::Gateway& gateway,
                                 const PromptRegistry& prompts, const llm::ModelParams& judge, std::uint64_t seed,
                                 int workers = 1);

nlohmann::json to_json(const PointwiseResult& r);
nlohmann::json to_json(const PairwiseResult& r, bool include_audit = false);

}  // namespace proutt::eval
