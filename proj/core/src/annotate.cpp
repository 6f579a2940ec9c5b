#include "proutt/annotate.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <mutex>
#include <sstream>

#include "proutt/corpus.hpp"
#include "proutt/error.hpp"
#include "proutt/rng.hpp"
#include "proutt/text.hpp"

namespace proutt::annotate {

using nlohmann::json;

namespace {

constexpr std::string_view kStates[] = {"collecting", "tie_breaking", "finalized", "invalid"};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

eval::Outcome deblind(Verdict v, bool swapped) {
  if (v == Verdict::tie) return eval::Outcome::tie;
  const bool side_a_wins = v == Verdict::A;
  return side_a_wins != swapped ? eval::Outcome::win : eval::Outcome::loss;
}

}  // namespace

std::string_view to_string(BatchState s) { return kStates[static_cast<int>(s)]; }

struct Store::Batch {
  std::string id;
  std::vector<AnnotationItem> items;
  std::map<std::string, std::size_t> index;
  std::vector<std::string> annotators;
  std::uint64_t seed = 0;
  BatchState state = BatchState::collecting;
  // primary verdicts: [annotator slot][item index]
  std::vector<std::vector<std::optional<Verdict>>> primary;
  std::vector<std::size_t> queue;                 // disagreement item indices
  std::map<std::size_t, Judgment> tie_breaks;     // resolved disagreements
  double agreement = 0.0;

  int slot(const std::string& annotator) const {
    for (std::size_t i = 0; i < annotators.size(); ++i)
      if (annotators[i] == annotator) return static_cast<int>(i);
    return -1;
  }
  std::size_t judged(int s) const {
    return static_cast<std::size_t>(
        std::count_if(primary[s].begin(), primary[s].end(), [](const auto& v) { return v.has_value(); }));
  }
};

std::vector<PairItem> load_pairs(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("malformed-pairs", "cannot read pairs file " + path.string());
  std::vector<PairItem> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      PairItem p;
      p.id = j.at("id").get<std::string>();
      const json& ctx = j.at("context");
      if (ctx.is_string()) {
        p.context = ctx.get<std::string>();
      } else {
        std::vector<DialogueTurn> turns;
        for (const auto& t : ctx)
          turns.push_back({static_cast<int>(turns.size()) + 1, t.at("user").get<std::string>(),
                           t.at("assistant").get<std::string>()});
        p.context = render_context(turns);
      }
      p.gt = j.at("gt").get<std::string>();
      p.pred_1 = j.at("pred_1").get<std::string>();
      p.pred_2 = j.at("pred_2").get<std::string>();
      if (!ids.insert(p.id).second) throw ParseError("malformed-pairs", "duplicate id " + p.id);
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ParseError("malformed-pairs", path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("malformed-pairs", path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (out.empty()) throw ParseError("malformed-pairs", "pairs file " + path.string() + " has no items");
  return out;
}

json client_view(const AnnotationItem& item, std::size_t index) {
  return {{"item_id", item.item_id},
          {"index", index},
          {"context", item.context},
          {"gt_utterance", item.gt_utterance},
          {"side_a", item.side_a},
          {"side_b", item.side_b}};
}

json to_json(const BatchReport& r) {
  json j{{"batch_id", r.batch_id},
         {"items", r.items},
         {"agreement", r.agreement},
         {"tie_breaks", r.tie_breaks},
         {"first_over_second", {{"win", r.win}, {"tie", r.tie}, {"loss", r.loss}}}};
  if (r.consistency) j["consistency"] = eval::to_json(*r.consistency);
  return j;
}

std::map<std::string, eval::Outcome> load_llm_verdicts(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io-error", "cannot read " + path.string());
  std::map<std::string, eval::Outcome> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      out[j.at("id").get<std::string>()] = eval::outcome_from_string(j.at("outcome").get<std::string>());
    } catch (const json::exception& e) {
      throw ParseError("malformed-verdicts", path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Store::Store(std::optional<std::filesystem::path> log_path, Clock clock)
    : log_path_(std::move(log_path)), clock_(clock ? std::move(clock) : Clock(utc_now)) {
  if (!log_path_) return;
  if (std::filesystem::exists(*log_path_)) {
    std::ifstream in(*log_path_, std::ios::binary);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (text::trim(line).empty()) continue;
      json event;
      try {
        event = json::parse(line);
      } catch (const json::exception& e) {
        // A torn final line from a crash mid-append is dropped; anything else is corruption.
        if (in.peek() == std::char_traits<char>::eof()) break;
        throw ParseError("corrupt-log", log_path_->string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
      apply(event, true);
    }
  }
  log_.open(*log_path_, std::ios::binary | std::ios::app);
  if (!log_) throw Error("io-error", "cannot open event log " + log_path_->string());
}

void Store::log(const json& event) {
  if (!log_path_) return;
  log_ << event.dump() << '\n';
  log_.flush();
  if (!log_) throw Error("io-error", "event log append failed");
}

const Store::Batch& Store::get(const std::string& batch_id) const {
  auto it = batches_.find(batch_id);
  if (it == batches_.end()) throw Error("unknown-batch", "no batch " + batch_id);
  return *it->second;
}

Store::Batch& Store::get(const std::string& batch_id) {
  return const_cast<Batch&>(static_cast<const Store*>(this)->get(batch_id));
}

void Store::apply(const json& e, bool replay) {
  const std::string type = e.at("type").get<std::string>();
  if (type == "batch_created") {
    auto b = std::make_shared<Batch>();
    b->id = e.at("batch_id").get<std::string>();
    b->annotators = e.at("annotators").get<std::vector<std::string>>();
    b->seed = e.at("seed").get<std::uint64_t>();
    for (const auto& it : e.at("items")) {
      AnnotationItem item{it.at("item_id").get<std::string>(), it.at("context").get<std::string>(),
                          it.at("gt_utterance").get<std::string>(), it.at("side_a").get<std::string>(),
                          it.at("side_b").get<std::string>(), it.at("swapped").get<bool>()};
      b->index[item.item_id] = b->items.size();
      b->items.push_back(std::move(item));
    }
    b->primary.assign(2, std::vector<std::optional<Verdict>>(b->items.size()));
    order_.push_back(b->id);
    batches_[b->id] = std::move(b);
    return;
  }
  if (type != "judgment") {
    if (replay) return;  // state events are informational
    throw Error("internal", "unknown event type " + type);
  }

  Batch& b = get(e.at("batch_id").get<std::string>());
  Judgment j{e.at("item_id").get<std::string>(), e.at("annotator_id").get<std::string>(),
             verdict_from_string(e.at("verdict").get<std::string>()), e.at("ts").get<std::string>()};
  const std::size_t idx = b.index.at(j.item_id);
  const int slot = b.slot(j.annotator_id);

  auto transition = [&](BatchState to) {
    const BatchState from = b.state;
    b.state = to;
    if (!replay)
      log({{"type", "state"}, {"batch_id", b.id}, {"from", to_string(from)}, {"to", to_string(to)},
           {"ts", j.timestamp}});
  };

  if (slot < 2) {
    b.primary[slot][idx] = j.verdict;
    if (b.judged(0) == b.items.size() && b.judged(1) == b.items.size()) {
      std::size_t matches = 0;
      for (std::size_t i = 0; i < b.items.size(); ++i) {
        if (*b.primary[0][i] == *b.primary[1][i]) ++matches;
        else b.queue.push_back(i);
      }
      b.agreement = static_cast<double>(matches) / static_cast<double>(b.items.size());
      if (matches * 4 < b.items.size() * 3) {
        transition(BatchState::invalid);
        return;
      }
      transition(BatchState::tie_breaking);
      if (b.queue.empty() || b.annotators.size() < 3) transition(BatchState::finalized);
    }
  } else {
    b.tie_breaks[idx] = j;
    if (b.tie_breaks.size() == b.queue.size()) transition(BatchState::finalized);
  }
}

std::string Store::create_batch(const std::vector<PairItem>& pairs, const std::vector<std::string>& annotators,
                                std::uint64_t seed) {
  if (annotators.size() < 2) throw UsageError("bad-request", "a batch needs at least two annotators");
  std::set<std::string> unique(annotators.begin(), annotators.end());
  if (unique.size() != annotators.size()) throw UsageError("bad-request", "annotator ids must be distinct");
  for (const auto& a : annotators)
    if (text::trim(a).empty()) throw UsageError("bad-request", "empty annotator id");
  if (pairs.empty()) throw UsageError("bad-request", "a batch needs at least one item");

  json items = json::array();
  std::set<std::string> ids;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (!ids.insert(p.id).second) throw UsageError("bad-request", "duplicate item id " + p.id);
    Rng rng(derive_seed(seed, p.id, i));
    const bool swapped = rng.coin();
    items.push_back({{"item_id", p.id},
                     {"context", p.context},
                     {"gt_utterance", p.gt},
                     {"side_a", swapped ? p.pred_2 : p.pred_1},
                     {"side_b", swapped ? p.pred_1 : p.pred_2},
                     {"swapped", swapped}});
  }

  std::unique_lock lock(mu_);
  char id[32];
  std::snprintf(id, sizeof id, "batch-%04zu", order_.size() + 1);
  const json event{{"type", "batch_created"}, {"batch_id", id},  {"annotators", annotators},
                   {"seed", seed},            {"items", items}, {"ts", clock_()}};
  log(event);
  apply(event, false);
  return id;
}

std::vector<std::string> Store::batch_ids() const {
  std::shared_lock lock(mu_);
  return order_;
}

BatchState Store::state(const std::string& batch_id) const {
  std::shared_lock lock(mu_);
  return get(batch_id).state;
}

std::size_t Store::queued(const std::string& batch_id) const {
  std::shared_lock lock(mu_);
  const Batch& b = get(batch_id);
  return b.queue.size() - b.tie_breaks.size();
}

json Store::status(const std::string& batch_id) const {
  std::shared_lock lock(mu_);
  const Batch& b = get(batch_id);
  json progress = json::object();
  for (int s = 0; s < 2; ++s) progress[b.annotators[s]] = b.judged(s);
  json j{{"batch_id", b.id},
         {"state", to_string(b.state)},
         {"items", b.items.size()},
         {"annotators", b.annotators},
         {"progress", progress},
         {"queued", b.queue.size() - b.tie_breaks.size()}};
  if (b.state != BatchState::collecting) j["agreement"] = b.agreement;
  return j;
}

NextItem Store::next_item(const std::string& batch_id, const std::string& annotator) const {
  std::shared_lock lock(mu_);
  const Batch& b = get(batch_id);
  const int slot = b.slot(annotator);
  if (slot < 0) throw Error("unknown-annotator", "annotator " + annotator + " is not assigned to " + batch_id);
  NextItem out;
  if (slot < 2) {
    for (std::size_t i = 0; i < b.items.size(); ++i) {
      if (b.primary[slot][i]) continue;
      if (!out.item) {
        out.done = false;
        out.index = i;
        out.item = b.items[i];
      }
      ++out.remaining;
    }
    return out;
  }
  if (b.state == BatchState::collecting)
    throw Error("wrong-state", "tie-breaking has not started for " + batch_id);
  if (b.state != BatchState::tie_breaking) return out;
  for (std::size_t i : b.queue) {
    if (b.tie_breaks.count(i)) continue;
    if (!out.item) {
      out.done = false;
      out.index = i;
      out.item = b.items[i];
    }
    ++out.remaining;
  }
  return out;
}

void Store::submit(const std::string& batch_id, const std::string& item_id, const std::string& annotator,
                   Verdict verdict) {
  std::unique_lock lock(mu_);
  Batch& b = get(batch_id);
  const int slot = b.slot(annotator);
  if (slot < 0) throw Error("unknown-annotator", "annotator " + annotator + " is not assigned to " + batch_id);
  auto it = b.index.find(item_id);
  if (it == b.index.end()) throw Error("unknown-item", "no item " + item_id + " in " + batch_id);
  const std::size_t idx = it->second;

  if (slot < 2) {
    if (b.primary[slot][idx]) throw Error("duplicate", annotator + " already judged " + item_id);
    if (b.state != BatchState::collecting) throw Error("wrong-state", batch_id + " is no longer collecting");
  } else {
    if (b.state != BatchState::tie_breaking) throw Error("wrong-state", batch_id + " is not tie-breaking");
    auto tb = b.tie_breaks.find(idx);
    if (tb != b.tie_breaks.end()) {
      if (tb->second.annotator_id == annotator) throw Error("duplicate", annotator + " already judged " + item_id);
      throw Error("not-pending", item_id + " is already resolved");
    }
    if (std::find(b.queue.begin(), b.queue.end(), idx) == b.queue.end())
      throw Error("not-pending", item_id + " needs no tie-break");
  }

  const json event{{"type", "judgment"},       {"batch_id", batch_id},
                   {"item_id", item_id},       {"annotator_id", annotator},
                   {"verdict", to_string(verdict)}, {"ts", clock_()}};
  log(event);
  apply(event, false);
}

BatchReport Store::report(const std::string& batch_id, const std::map<std::string, eval::Outcome>* llm) const {
  std::shared_lock lock(mu_);
  const Batch& b = get(batch_id);
  if (b.state != BatchState::finalized)
    throw Error("wrong-state", batch_id + " is " + std::string(to_string(b.state)) + ", not finalized");
  BatchReport r;
  r.batch_id = b.id;
  r.items = b.items.size();
  r.agreement = b.agreement;
  r.tie_breaks = b.tie_breaks.size();
  for (std::size_t i = 0; i < b.items.size(); ++i) {
    Verdict v = *b.primary[0][i];
    if (*b.primary[1][i] != v) {
      auto tb = b.tie_breaks.find(i);
      v = tb != b.tie_breaks.end() ? tb->second.verdict : Verdict::tie;
    }
    const eval::Outcome o = deblind(v, b.items[i].swapped);
    r.finals.push_back(o);
    if (o == eval::Outcome::win) ++r.win;
    else if (o == eval::Outcome::tie) ++r.tie;
    else ++r.loss;
  }
  if (llm) {
    std::vector<eval::Outcome> human, machine;
    for (std::size_t i = 0; i < b.items.size(); ++i) {
      auto it = llm->find(b.items[i].item_id);
      if (it == llm->end()) continue;
      human.push_back(r.finals[i]);
      machine.push_back(it->second);
    }
    if (!human.empty()) r.consistency = eval::consistency_report(human, machine, b.seed);
  }
  return r;
}

std::vector<AnnotationItem> Store::items(const std::string& batch_id) const {
  std::shared_lock lock(mu_);
  return get(batch_id).items;
}

int http_status(std::string_view kind) {
  if (kind == "bad-request" || kind == "malformed-pairs" || kind == "unrecognized-verdict" ||
      kind == "malformed-verdicts")
    return 400;
  if (kind == "unknown-batch" || kind == "unknown-annotator" || kind == "unknown-item" || kind == "not-found")
    return 404;
  if (kind == "duplicate" || kind == "wrong-state" || kind == "not-pending") return 409;
  return 500;
}

}  // namespace proutt::annotate
