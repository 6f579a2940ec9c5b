#include "proutt/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include "proutt/error.hpp"
#include "proutt/synthesis.hpp"
#include "proutt/text.hpp"

namespace proutt::eval {

using nlohmann::json;

namespace {

constexpr std::string_view kOutcomes[] = {"win", "tie", "loss"};

void check_pair(const std::vector<Outcome>& a, const std::vector<Outcome>& b) {
  if (a.size() != b.size())
    throw UsageError("length-mismatch", "verdict lists differ in length (" + std::to_string(a.size()) + " vs " +
                                            std::to_string(b.size()) + ")");
  if (a.empty()) throw UsageError("empty-input", "verdict lists are empty");
}

Confusion confusion_of(const std::vector<Outcome>& a, const std::vector<Outcome>& b) {
  Confusion m{};
  for (std::size_t i = 0; i < a.size(); ++i) m[static_cast<int>(a[i])][static_cast<int>(b[i])]++;
  return m;
}

double kappa_of(const Confusion& m, std::size_t n) {
  const auto nd = static_cast<double>(n);
  double po = 0.0;
  double pe = 0.0;
  for (int i = 0; i < 3; ++i) {
    po += static_cast<double>(m[i][i]);
    double row = 0.0;
    double col = 0.0;
    for (int j = 0; j < 3; ++j) {
      row += static_cast<double>(m[i][j]);
      col += static_cast<double>(m[j][i]);
    }
    pe += (row / nd) * (col / nd);
  }
  po /= nd;
  if (po >= 1.0) return 1.0;
  return (po - pe) / (1.0 - pe);
}

template <class F>
void parallel_for(std::size_t n, int workers, F&& f) {
  const int w = std::clamp(workers, 1, static_cast<int>(std::max<std::size_t>(n, 1)));
  if (w == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex mu;
  {
    std::vector<std::jthread> pool;
    for (int t = 0; t < w; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            f(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
  }
  if (first_error) std::rethrow_exception(first_error);
}

std::map<std::string, const Prediction*> index_predictions(const std::vector<Prediction>& preds, std::string_view what) {
  std::map<std::string, const Prediction*> out;
  for (const auto& p : preds)
    if (!out.emplace(p.id, &p).second)
      throw ParseError("duplicate-id", std::string(what) + " repeats id " + p.id);
  return out;
}

const Prediction& lookup(const std::map<std::string, const Prediction*>& m, const std::string& id,
                         std::string_view what) {
  auto it = m.find(id);
  if (it == m.end()) throw ParseError("missing-prediction", std::string(what) + " has no entry for " + id);
  return *it->second;
}

DialogueContext context_of(const TestItem& item) {
  DialogueContext c;
  c.dialogue_id = item.id;
  c.k = static_cast<int>(item.context.size());
  c.turns = item.context;
  return c;
}

template <class T, class F>
std::vector<T> read_jsonl(const std::filesystem::path& path, F&& convert) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io-error", "cannot read " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(convert(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError("malformed-record", path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

double sample_sd(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return std::sqrt(v / static_cast<double>(xs.size() - 1));
}

double mean(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

json interval_json(const Interval& i) { return json::array({i.lo, i.hi}); }

}  // namespace

std::string_view to_string(Outcome o) { return kOutcomes[static_cast<int>(o)]; }

Outcome outcome_from_string(std::string_view s) {
  const std::string l = text::to_lower(text::trim(s));
  for (int i = 0; i < 3; ++i)
    if (kOutcomes[i] == l) return static_cast<Outcome>(i);
  if (l == "lose") return Outcome::loss;
  throw ParseError("unknown-outcome", "unknown outcome: " + std::string(s));
}

double pointwise_best_of(llm::Gateway& gateway, const PromptRegistry& prompts, const llm::ModelParams& judge,
                         const DialogueContext& context, const std::vector<std::string>& candidates,
                         std::string_view gt) {
  if (candidates.empty() || candidates.size() > 8)
    throw UsageError("bad-candidate-count", "pointwise judging takes 1 to 8 candidates, got " +
                                                std::to_string(candidates.size()));
  double best = 0.0;
  for (const auto& c : candidates) best = std::max(best, judge_score(gateway, prompts, judge, context, gt, c));
  return best;
}

double embed_best_of(const std::vector<std::string>& candidates, std::string_view gt, llm::Embedder& embedder) {
  if (candidates.empty()) throw UsageError("bad-candidate-count", "no candidates to embed");
  std::vector<std::string> texts{std::string(gt)};
  texts.insert(texts.end(), candidates.begin(), candidates.end());
  const auto vecs = embedder.embed(texts);
  double best = -1.0;
  for (std::size_t i = 1; i < vecs.size(); ++i) best = std::max(best, llm::cosine(vecs[0], vecs[i]));
  return best;
}

Outcome pairwise_compare(llm::Gateway& gateway, const PromptRegistry& prompts, const llm::ModelParams& judge,
                         const DialogueContext& context, std::string_view pred_a, std::string_view pred_b,
                         std::string_view gt, Rng& rng, SwapRecord* audit) {
  const bool swapped = rng.coin();
  const PromptVars vars{{"dialogue", render_context(context.turns)},
                        {"ground_truth", std::string(gt)},
                        {"prediction_a", std::string(swapped ? pred_b : pred_a)},
                        {"prediction_b", std::string(swapped ? pred_a : pred_b)}};
  auto messages = prompts.render(TemplateId::judge_pairwise, InstructionStyle::structured, vars);
  const Verdict v = chat_parsed(gateway, judge.request(std::move(messages), "judge_pairwise"),
                                [](const std::string& out) { return parse_pairwise_verdict(out); });
  Outcome o = Outcome::tie;
  if (v == Verdict::A) o = swapped ? Outcome::loss : Outcome::win;
  if (v == Verdict::B) o = swapped ? Outcome::win : Outcome::loss;
  if (audit) {
    audit->item_id = context.dialogue_id;
    audit->swapped = swapped;
    audit->raw = v;
    audit->outcome = o;
  }
  return o;
}

double agreement_rate(const std::vector<Outcome>& a, const std::vector<Outcome>& b) {
  check_pair(a, b);
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.size());
}

double cohen_kappa(const std::vector<Outcome>& a, const std::vector<Outcome>& b) {
  check_pair(a, b);
  return kappa_of(confusion_of(a, b), a.size());
}

Interval wilson_ci(std::size_t successes, std::size_t n, double z) {
  if (n == 0) throw UsageError("empty-input", "Wilson interval needs n > 0");
  if (successes > n) throw UsageError("bad-count", "successes exceed n");
  const double nd = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nd;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nd;
  const double center = (p + z2 / (2.0 * nd)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nd + z2 / (4.0 * nd * nd)) / denom;
  Interval out{std::clamp(center - half, 0.0, 1.0), std::clamp(center + half, 0.0, 1.0)};
  if (successes == 0) out.lo = 0.0;
  if (successes == n) out.hi = 1.0;
  return out;
}

ConsistencyReport consistency_report(const std::vector<Outcome>& human, const std::vector<Outcome>& llm,
                                     std::uint64_t seed, int resamples) {
  check_pair(human, llm);
  ConsistencyReport r;
  r.n = human.size();
  r.confusion = confusion_of(human, llm);
  std::size_t trace = r.confusion[0][0] + r.confusion[1][1] + r.confusion[2][2];
  r.agreement = static_cast<double>(trace) / static_cast<double>(r.n);
  r.agreement_ci = wilson_ci(trace, r.n);
  r.kappa = kappa_of(r.confusion, r.n);

  if (resamples > 0) {
    Rng rng(seed);
    std::vector<double> ks;
    ks.reserve(static_cast<std::size_t>(resamples));
    for (int b = 0; b < resamples; ++b) {
      Confusion m{};
      for (std::size_t i = 0; i < r.n; ++i) {
        const auto j = rng.uniform_index(r.n);
        m[static_cast<int>(human[j])][static_cast<int>(llm[j])]++;
      }
      ks.push_back(kappa_of(m, r.n));
    }
    std::sort(ks.begin(), ks.end());
    const auto B = static_cast<double>(resamples);
    const auto lo = static_cast<std::size_t>(std::floor(0.025 * B));
    const auto hi = std::min(ks.size() - 1, static_cast<std::size_t>(std::ceil(0.975 * B)) - 1);
    r.kappa_ci = {ks[lo], ks[hi]};
  } else {
    r.kappa_ci = {r.kappa, r.kappa};
  }
  return r;
}

json to_json(const ConsistencyReport& r) {
  json confusion = json::array();
  for (const auto& row : r.confusion) confusion.push_back(row);
  return {{"n", r.n},
          {"agreement", r.agreement},
          {"agreement_ci", interval_json(r.agreement_ci)},
          {"kappa", r.kappa},
          {"kappa_ci", interval_json(r.kappa_ci)},
          {"confusion", confusion},
          {"labels", {"win", "tie", "loss"}}};
}

// ---------------------------------------------------------------------------

std::vector<TestItem> load_test_set(const std::filesystem::path& path) {
  return read_jsonl<TestItem>(path, [](const json& j) {
    TestItem t;
    t.id = j.at("id").get<std::string>();
    for (const auto& turn : j.at("context"))
      t.context.push_back({static_cast<int>(t.context.size()) + 1, turn.at("user").get<std::string>(),
                           turn.at("assistant").get<std::string>()});
    t.gt = j.at("gt").get<std::string>();
    return t;
  });
}

std::vector<Prediction> load_predictions(const std::filesystem::path& path) {
  return read_jsonl<Prediction>(path, [](const json& j) {
    return Prediction{j.at("id").get<std::string>(), j.at("candidates").get<std::vector<std::string>>()};
  });
}

PointwiseResult evaluate_pointwise(const std::vector<TestItem>& test, const std::vector<Prediction>& predictions,
                                   llm::Gateway& gateway, const PromptRegistry& prompts,
                                   const PointwiseOptions& options) {
  if (options.repeats < 1) throw UsageError("bad-repeats", "repeats must be at least 1");
  const auto preds = index_predictions(predictions, "predictions");
  const std::size_t n = test.size();
  const auto reps = static_cast<std::size_t>(options.repeats);

  PointwiseResult r;
  r.repeats = options.repeats;
  std::vector<std::vector<double>> scores(n, std::vector<double>(reps, 0.0));
  r.embed_sims.assign(n, 0.0);
  auto embedder = gateway.embedder(options.embed_model);

  parallel_for(n * reps, options.workers, [&](std::size_t job) {
    const std::size_t i = job / reps;
    const std::size_t rep = job % reps;
    const auto& p = lookup(preds, test[i].id, "predictions");
    scores[i][rep] = pointwise_best_of(gateway, prompts, options.judge, context_of(test[i]), p.candidates,
                                       test[i].gt);
  });
  for (std::size_t i = 0; i < n; ++i) {
    r.ids.push_back(test[i].id);
    r.best_scores.push_back(mean(scores[i]));
    r.embed_sims[i] = embed_best_of(lookup(preds, test[i].id, "predictions").candidates, test[i].gt, *embedder);
  }

  std::vector<double> rep_means;
  for (std::size_t rep = 0; rep < reps; ++rep) {
    std::vector<double> col;
    for (std::size_t i = 0; i < n; ++i) col.push_back(scores[i][rep]);
    rep_means.push_back(100.0 * mean(col));
  }
  r.llm_judge_mean = 100.0 * mean(r.best_scores);
  const double half = 1.96 * sample_sd(rep_means) / std::sqrt(static_cast<double>(reps));
  r.llm_judge_ci = {r.llm_judge_mean - half, r.llm_judge_mean + half};
  r.embed_mean = 100.0 * mean(r.embed_sims);
  r.embed_ci = {r.embed_mean, r.embed_mean};
  return r;
}

PairwiseResult evaluate_pairwise(const std::vector<TestItem>& test, const std::vector<Prediction>& system_a,
                                 const std::vector<Prediction>& system_b, llm::Gateway& gateway,
                                 const PromptRegistry& prompts, const llm::ModelParams& judge, std::uint64_t seed,
                                 int workers) {
  const auto a = index_predictions(system_a, "system A predictions");
  const auto b = index_predictions(system_b, "system B predictions");
  PairwiseResult r;
  r.audit.resize(test.size());
  r.outcomes.resize(test.size());
  parallel_for(test.size(), workers, [&](std::size_t i) {
    const auto& pa = lookup(a, test[i].id, "system A predictions");
    const auto& pb = lookup(b, test[i].id, "system B predictions");
    if (pa.candidates.empty() || pb.candidates.empty())
      throw ParseError("missing-prediction", "empty candidate list for " + test[i].id);
    Rng rng(derive_seed(seed, test[i].id, 0));
    r.outcomes[i] = pairwise_compare(gateway, prompts, judge, context_of(test[i]), pa.candidates.front(),
                                     pb.candidates.front(), test[i].gt, rng, &r.audit[i]);
  });
  for (Outcome o : r.outcomes) {
    if (o == Outcome::win) ++r.win;
    else if (o == Outcome::tie) ++r.tie;
    else ++r.loss;
  }
  return r;
}

json to_json(const PointwiseResult& r) {
  return {{"llm_judge_mean", r.llm_judge_mean},
          {"llm_judge_ci", interval_json(r.llm_judge_ci)},
          {"embed_mean", r.embed_mean},
          {"embed_ci", interval_json(r.embed_ci)},
          {"repeats", r.repeats},
          {"n", r.best_scores.size()}};
}

json to_json(const PairwiseResult& r, bool include_audit) {
  json j{{"win", r.win}, {"tie", r.tie}, {"loss", r.loss}};
  if (include_audit) {
    json audit = json::array();
    for (const auto& s : r.audit)
      audit.push_back({{"id", s.item_id},
                       {"swapped", s.swapped},
                       {"raw", std::string(to_string(s.raw))},
                       {"outcome", std::string(to_string(s.outcome))}});
    j["audit"] = audit;
  }
  return j;
}

}  // namespace proutt::eval
