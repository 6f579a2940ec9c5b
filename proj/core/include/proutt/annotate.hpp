#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "proutt/evalkit.hpp"
#include "proutt/promptkit.hpp"

namespace proutt::annotate {

enum class BatchState { collecting, tie_breaking, finalized, invalid };
std::string_view to_string(BatchState s);

/// One line of a pairs file: {id, context, gt, pred_1, pred_2}. `context` is
/// either text or a list of {user, assistant} turns.
struct PairItem {
  std::string id;
  std::string context;
  std::string gt;
  std::string pred_1;
  std::string pred_2;
};

std::vector<PairItem> load_pairs(const std::filesystem::path& path);

/// Server-side item. `swapped` means side A shows pred_2; it never leaves the
/// server.
struct AnnotationItem {
  std::string item_id;
  std::string context;
  std::string gt_utterance;
  std::string side_a;
  std::string side_b;
  bool swapped = false;
};

/// Client-facing JSON of an item: no mapping information.
nlohmann::json client_view(const AnnotationItem& item, std::size_t index);

struct Judgment {
  std::string item_id;
  std::string annotator_id;
  Verdict verdict = Verdict::tie;
  std::string timestamp;
};

struct NextItem {
  bool done = true;
  std::size_t index = 0;
  std::size_t remaining = 0;
  std::optional<AnnotationItem> item;
};

struct BatchReport {
  std::string batch_id;
  std::size_t items = 0;
  double agreement = 0.0;
  std::size_t tie_breaks = 0;
  /// Outcomes for the pred_1 system, per item in batch order.
  std::vector<eval::Outcome> finals;
  std::size_t win = 0;
  std::size_t tie = 0;
  std::size_t loss = 0;
  std::optional<eval::ConsistencyReport> consistency;
};

/// Client-safe report JSON: aggregate counts only.
nlohmann::json to_json(const BatchReport& r);

/// LLM verdicts as JSONL {id, outcome} with outcome in {win, tie, loss} for pred_1.
std::map<std::string, eval::Outcome> load_llm_verdicts(const std::filesystem::path& path);

/// Annotation batches with their protocol state.
///
/// The first two annotators of a batch are the primaries; later ones only
/// resolve disagreements. Once both primaries have judged every item the batch
/// becomes invalid (exact-match agreement below 0.75) or moves to
/// tie-breaking; it is finalized when every disagreement is resolved. With no
/// third annotator, disagreements resolve to tie.
///
/// Every mutation is appended to a JSONL event log before it is applied;
/// constructing a Store over an existing log replays it.
class Store {
 public:
  using Clock = std::function<std::string()>;

  explicit Store(std::optional<std::filesystem::path> log_path = std::nullopt, Clock clock = {});

  std::string create_batch(const std::vector<PairItem>& pairs, const std::vector<std::string>& annotators,
                           std::uint64_t seed);

  std::vector<std::string> batch_ids() const;
  BatchState state(const std::string& batch_id) const;
  /// Disagreement items awaiting a third verdict.
  std::size_t queued(const std::string& batch_id) const;
  /// Client-safe status: id, state, item count, annotators, progress.
  nlohmann::json status(const std::string& batch_id) const;

  NextItem next_item(const std::string& batch_id, const std::string& annotator) const;
  void submit(const std::string& batch_id, const std::string& item_id, const std::string& annotator,
              Verdict verdict);

  BatchReport report(const std::string& batch_id,
                     const std::map<std::string, eval::Outcome>* llm_verdicts = nullptr) const;

  /// Items with their hidden side mapping, for tests and offline audits.
  std::vector<AnnotationItem> items(const std::string& batch_id) const;

 private:
  struct Batch;

  void apply(const nlohmann::json& event, bool replay);
  void log(const nlohmann::json& event);
  const Batch& get(const std::string& batch_id) const;
  Batch& get(const std::string& batch_id);

  std::optional<std::filesystem::path> log_path_;
  std::ofstream log_;
  Clock clock_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<Batch>> batches_;
  std::vector<std::string> order_;
};

/// HTTP front end for a Store.
class Server {
 public:
  Server(Store& store, std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds to host:port (port 0 picks a free port) and returns the port.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// HTTP status for an error kind (400, 404 or 409; 500 otherwise).
int http_status(std::string_view kind);

}  // namespace proutt::annotate
