#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "proutt/annotate.hpp"
#include "proutt/error.hpp"
#include "annotation_rig.hpp"

using namespace proutt;
using namespace proutt::annotate;
using nlohmann::json;
using testing::AnnotationRig;

namespace {

std::string kind_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return "";
}

std::vector<PairItem> pairs(int n) {
  std::vector<PairItem> out;
  for (int i = 0; i < n; ++i) {
    const auto s = std::to_string(i);
    out.push_back({"p" + s, "[Turn 1] User: q" + s + "\n", "gt " + s, "one " + s, "two " + s});
  }
  return out;
}

std::filesystem::path temp(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("proutt-annotate-" + name);
  std::filesystem::remove(p);
  return p;
}

// Verdict naming the side that shows pred_1.
Verdict prefer_first(const AnnotationItem& item) { return item.swapped ? Verdict::B : Verdict::A; }

std::string create(AnnotationRig& rig, const std::filesystem::path& pairs_path, json annotators,
                   std::uint64_t seed = 3) {
  const auto r = rig.post("/batches", {{"pairs_path", pairs_path.string()}, {"annotators", annotators}, {"seed", seed}});
  REQUIRE(r.status == 200);
  return r.body.at("batch_id");
}

void contains_no_mapping(const json& j) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      CHECK_MESSAGE(it.key() != "swapped", it.key());
      CHECK_MESSAGE(it.key() != "pred_1", it.key());
      CHECK_MESSAGE(it.key() != "pred_2", it.key());
      contains_no_mapping(*it);
    }
  } else if (j.is_array()) {
    for (const auto& v : j) contains_no_mapping(v);
  }
}

}  // namespace

TEST_CASE("pairs files") {
  const auto path = testing::write_pairs("load", 3);
  const auto ps = load_pairs(path);
  REQUIRE(ps.size() == 3);
  CHECK(ps[1].context == "[Turn 1] User: Question 1\n[Turn 1] Assistant: Answer 1\n");
  CHECK(ps[2].pred_2 == "guess beta 2");

  const auto bad = temp("bad.jsonl");
  std::ofstream(bad) << R"({"id":"x","context":"c","gt":"g","pred_1":"a","pred_2":"b"})" << "\n"
                     << R"({"id":"x","context":"c","gt":"g","pred_1":"a","pred_2":"b"})" << "\n";
  CHECK(kind_of([&] { load_pairs(bad); }) == "malformed-pairs");
  std::ofstream(bad, std::ios::trunc) << R"({"id":"x","gt":"g"})" << "\n";
  CHECK(kind_of([&] { load_pairs(bad); }) == "malformed-pairs");
  std::ofstream(bad, std::ios::trunc) << "\n";
  CHECK(kind_of([&] { load_pairs(bad); }) == "malformed-pairs");
  CHECK(kind_of([&] { load_pairs(temp("missing.jsonl")); }) == "malformed-pairs");
}

TEST_CASE("state machine: agreement at the threshold and tie-breaking") {
  Store store;
  const auto id = store.create_batch(pairs(4), {"ann1", "ann2", "ann3"}, 1);
  CHECK(store.state(id) == BatchState::collecting);
  const auto items = store.items(id);
  for (const auto& it : items) store.submit(id, it.item_id, "ann1", Verdict::A);
  CHECK(store.state(id) == BatchState::collecting);
  CHECK(kind_of([&] { store.next_item(id, "ann3"); }) == "wrong-state");
  CHECK(kind_of([&] { store.report(id); }) == "wrong-state");
  // 3 of 4 agree: exactly 0.75 is valid.
  for (std::size_t i = 0; i < items.size(); ++i)
    store.submit(id, items[i].item_id, "ann2", i == 2 ? Verdict::B : Verdict::A);
  CHECK(store.state(id) == BatchState::tie_breaking);
  CHECK(store.queued(id) == 1);
  CHECK(store.status(id).at("agreement") == 0.75);

  const auto next = store.next_item(id, "ann3");
  REQUIRE(next.item);
  CHECK(next.item->item_id == "p2");
  CHECK(next.remaining == 1);
  CHECK(kind_of([&] { store.submit(id, "p0", "ann3", Verdict::A); }) == "not-pending");
  CHECK(kind_of([&] { store.submit(id, "p0", "ann1", Verdict::A); }) == "duplicate");
  store.submit(id, "p2", "ann3", Verdict::tie);
  CHECK(store.state(id) == BatchState::finalized);
  CHECK(kind_of([&] { store.submit(id, "p2", "ann3", Verdict::A); }) == "wrong-state");
  CHECK(store.next_item(id, "ann3").done);

  const auto r = store.report(id);
  CHECK(r.items == 4);
  CHECK(r.tie_breaks == 1);
  CHECK(r.tie == 1);
  CHECK(r.win + r.tie + r.loss == 4);
}

TEST_CASE("state machine: low agreement invalidates the batch") {
  Store store;
  const auto id = store.create_batch(pairs(4), {"a", "b"}, 1);
  const auto items = store.items(id);
  for (std::size_t i = 0; i < items.size(); ++i) {
    store.submit(id, items[i].item_id, "a", Verdict::A);
    store.submit(id, items[i].item_id, "b", i < 2 ? Verdict::A : Verdict::B);
  }
  CHECK(store.state(id) == BatchState::invalid);
  CHECK(kind_of([&] { store.report(id); }) == "wrong-state");
}

TEST_CASE("without a third annotator disagreements resolve to tie") {
  Store store;
  const auto id = store.create_batch(pairs(8), {"a", "b"}, 9);
  const auto items = store.items(id);
  for (std::size_t i = 0; i < items.size(); ++i) {
    store.submit(id, items[i].item_id, "a", prefer_first(items[i]));
    store.submit(id, items[i].item_id, "b", i == 0 ? Verdict::tie : prefer_first(items[i]));
  }
  CHECK(store.state(id) == BatchState::finalized);
  const auto r = store.report(id);
  CHECK(r.win == 7);
  CHECK(r.tie == 1);
  CHECK(r.finals[0] == eval::Outcome::tie);
}

TEST_CASE("batch creation checks") {
  Store store;
  CHECK(kind_of([&] { store.create_batch(pairs(2), {"solo"}, 0); }) == "bad-request");
  CHECK(kind_of([&] { store.create_batch(pairs(2), {"a", "a"}, 0); }) == "bad-request");
  CHECK(kind_of([&] { store.create_batch({}, {"a", "b"}, 0); }) == "bad-request");
  auto dup = pairs(2);
  dup[1].id = dup[0].id;
  CHECK(kind_of([&] { store.create_batch(dup, {"a", "b"}, 0); }) == "bad-request");
  CHECK(kind_of([&] { store.state("batch-9999"); }) == "unknown-batch");

  // Side assignment is seeded and roughly balanced.
  const auto a = store.items(store.create_batch(pairs(400), {"a", "b"}, 5));
  const auto b = store.items(store.create_batch(pairs(400), {"a", "b"}, 5));
  std::size_t swapped = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].swapped == b[i].swapped);
    swapped += a[i].swapped;
    CHECK(a[i].side_a == (a[i].swapped ? "two " : "one ") + std::to_string(i));
  }
  CHECK(swapped > 150);
  CHECK(swapped < 250);
}

TEST_CASE("event log replay restores every batch") {
  const auto log = temp("replay.jsonl");
  std::string id;
  json status_before;
  {
    Store store(log, [] { return std::string("2026-01-01T00:00:00Z"); });
    id = store.create_batch(pairs(4), {"a", "b", "c"}, 2);
    const auto items = store.items(id);
    for (std::size_t i = 0; i < items.size(); ++i) {
      store.submit(id, items[i].item_id, "a", Verdict::A);
      store.submit(id, items[i].item_id, "b", i == 1 ? Verdict::tie : Verdict::A);
    }
    store.submit(id, "p1", "c", Verdict::B);
    status_before = store.status(id);
    store.create_batch(pairs(2), {"a", "b"}, 4);
  }
  Store again(log);
  CHECK(again.batch_ids().size() == 2);
  CHECK(again.status(id) == status_before);
  CHECK(again.state(id) == BatchState::finalized);
  CHECK(again.report(id).tie_breaks == 1);

  // Appends after replay go to the same log.
  const auto second = again.batch_ids()[1];
  again.submit(second, "p0", "a", Verdict::A);
  CHECK(Store(log).status(second).at("progress").at("a") == 1);

  // A torn last line is dropped; corruption elsewhere is fatal.
  std::ofstream(log, std::ios::app) << R"({"type":"judgment","batch_id")";
  CHECK(Store(log).status(second).at("progress").at("a") == 1);
  const auto corrupt = temp("corrupt.jsonl");
  std::ofstream(corrupt) << "{not json\n" << R"({"type":"state"})" << "\n";
  CHECK(kind_of([&] { Store s(corrupt); }) == "corrupt-log");
}

TEST_CASE("HTTP protocol end to end") {
  AnnotationRig rig;
  const auto path = testing::write_pairs("http", 20);
  const auto id = create(rig, path, {"ann1", "ann2", "ann3"});
  CHECK(rig.get("/batches").body.at("batches").size() == 1);
  CHECK(rig.get("/batches/" + id).body.at("state") == "collecting");
  CHECK(rig.get("/batches/" + id).body.at("items") == 20);

  const auto last = testing::judge_primaries(rig, id, "ann1", "ann2", 16);
  CHECK(last.status == 200);
  CHECK(last.body.at("state") == "tie_breaking");
  const auto st = rig.get("/batches/" + id).body;
  CHECK(st.at("queued") == 4);
  CHECK(st.at("agreement") == 0.8);

  CHECK(rig.get("/batches/" + id + "/report").status == 409);
  for (;;) {
    const auto next = rig.get("/batches/" + id + "/next?annotator=ann3");
    REQUIRE(next.status == 200);
    if (next.body.at("done").get<bool>()) break;
    const auto r = rig.post("/batches/" + id + "/judgments",
                            {{"item_id", next.body.at("item").at("item_id")}, {"annotator_id", "ann3"}, {"verdict", "tie"}});
    REQUIRE(r.status == 200);
  }
  const auto report = rig.get("/batches/" + id + "/report");
  REQUIRE(report.status == 200);
  const auto& counts = report.body.at("first_over_second");
  CHECK(counts.at("win").get<int>() + counts.at("tie").get<int>() + counts.at("loss").get<int>() == 20);
  CHECK(counts.at("tie") == 4);
  CHECK(report.body.at("tie_breaks") == 4);
}

TEST_CASE("HTTP errors map to status codes") {
  AnnotationRig rig;
  const auto path = testing::write_pairs("errors", 4);
  const auto id = create(rig, path, {"a", "b"});
  const std::string j = "/batches/" + id + "/judgments";

  CHECK(rig.get("/batches/batch-0404").status == 404);
  CHECK(rig.get("/batches/batch-0404").body.at("error") == "unknown-batch");
  CHECK(rig.get("/batches/" + id + "/next?annotator=zed").status == 404);
  CHECK(rig.get("/batches/" + id + "/next").status == 400);
  CHECK(rig.post(j, {{"item_id", "nope"}, {"annotator_id", "a"}, {"verdict", "A"}}).status == 404);
  CHECK(rig.post(j, {{"item_id", "p0"}, {"annotator_id", "zed"}, {"verdict", "A"}}).status == 404);
  CHECK(rig.post(j, {{"item_id", "p0"}, {"annotator_id", "a"}, {"verdict", "C"}}).status == 400);
  CHECK(rig.post(j, {{"item_id", "p0"}, {"annotator_id", "a"}}).status == 400);
  CHECK(rig.post_raw(j, "{broken").status == 400);
  CHECK(rig.post_raw(j, "[1,2]").status == 400);
  CHECK(rig.post(j, {{"item_id", "p0"}, {"annotator_id", "a"}, {"verdict", "A"}}).status == 200);
  const auto dup = rig.post(j, {{"item_id", "p0"}, {"annotator_id", "a"}, {"verdict", "B"}});
  CHECK(dup.status == 409);
  CHECK(dup.body.at("error") == "duplicate");
  CHECK(rig.get("/batches/" + id + "/report").status == 409);
  CHECK(rig.post("/batches", {{"pairs_path", "/nonexistent.jsonl"}, {"annotators", {"a", "b"}}}).status == 400);
  CHECK(rig.post("/batches", {{"pairs_path", path.string()}, {"annotators", {"a"}}}).status == 400);
  CHECK(rig.post("/batches", {{"annotators", {"a", "b"}}}).status == 400);
  const auto missing = rig.get("/no/such/route");
  CHECK(missing.status == 404);
  CHECK(missing.body.at("error") == "not-found");

  // Invalid batch rejects further work with 409.
  const auto low = create(rig, path, {"a", "b"});
  testing::judge_primaries(rig, low, "a", "b", 2);
  CHECK(rig.get("/batches/" + low).body.at("state") == "invalid");
  CHECK(rig.get("/batches/" + low + "/report").status == 409);
}

TEST_CASE("blinding: responses never reveal the side mapping") {
  AnnotationRig rig;
  const auto path = testing::write_pairs("blind", 30);
  const auto id = create(rig, path, {"a", "b", "c"}, 17);
  const auto hidden = rig.store.items(id);

  std::vector<testing::HttpReply> seen;
  Rng rng(99);
  const std::vector<std::string> annotators{"a", "b", "c", "zed"};
  const std::vector<std::string> verdicts{"A", "B", "tie", "x"};
  for (int i = 0; i < 300; ++i) {
    const auto who = annotators[rng.uniform_index(annotators.size())];
    switch (rng.uniform_index(4)) {
      case 0: seen.push_back(rig.get("/batches/" + id + "/next?annotator=" + who)); break;
      case 1: seen.push_back(rig.get("/batches/" + id)); break;
      case 2: seen.push_back(rig.get("/batches/" + id + "/report")); break;
      default:
        seen.push_back(rig.post("/batches/" + id + "/judgments",
                                {{"item_id", "p" + std::to_string(rng.uniform_index(32))},
                                 {"annotator_id", who},
                                 {"verdict", verdicts[rng.uniform_index(verdicts.size())]}}));
    }
  }
  seen.push_back(rig.get("/batches"));
  for (const auto& r : seen) {
    CHECK(r.status != 0);
    CHECK(r.status != 500);
    contains_no_mapping(r.body);
    CHECK(r.raw.find("swapped") == std::string::npos);
  }

  // Items are served with sides as stored, so a side choice deblinds correctly.
  for (const auto& r : seen) {
    if (!r.body.is_object() || !r.body.contains("item")) continue;
    const auto& item = r.body.at("item");
    const auto& h = hidden.at(item.at("index").get<std::size_t>());
    CHECK(item.at("side_a") == h.side_a);
    CHECK(item.at("item_id") == h.item_id);
  }
}

TEST_CASE("deblinding over HTTP and LLM consistency") {
  AnnotationRig rig;
  const auto path = testing::write_pairs("deblind", 40);
  const auto id = create(rig, path, {"a", "b"}, 8);
  // Both annotators always pick whichever side shows pred_1.
  for (const auto* who : {"a", "b"}) {
    for (;;) {
      const auto next = rig.get(std::string("/batches/") + id + "/next?annotator=" + who);
      if (next.body.at("done").get<bool>()) break;
      const auto& item = next.body.at("item");
      const bool a_is_first = item.at("side_a").get<std::string>().starts_with("guess alpha");
      rig.post("/batches/" + id + "/judgments",
               {{"item_id", item.at("item_id")}, {"annotator_id", who}, {"verdict", a_is_first ? "A" : "B"}});
    }
  }
  const auto verdicts = temp("llm.jsonl");
  {
    std::ofstream f(verdicts);
    for (int i = 0; i < 40; ++i) f << json{{"id", "p" + std::to_string(i)}, {"outcome", i < 30 ? "win" : "loss"}}.dump() << "\n";
  }
  const auto report = rig.get("/batches/" + id + "/report?llm_verdicts=" + verdicts.string());
  REQUIRE(report.status == 200);
  CHECK(report.body.at("first_over_second").at("win") == 40);
  CHECK(report.body.at("consistency").at("agreement") == doctest::Approx(0.75));
  CHECK(report.body.at("consistency").at("n") == 40);

  std::size_t swapped = 0;
  for (const auto& it : rig.store.items(id)) swapped += it.swapped;
  CHECK(swapped > 0);
  CHECK(swapped < 40);
}

TEST_CASE("status codes for error kinds") {
  CHECK(http_status("bad-request") == 400);
  CHECK(http_status("unrecognized-verdict") == 400);
  CHECK(http_status("unknown-batch") == 404);
  CHECK(http_status("not-found") == 404);
  CHECK(http_status("duplicate") == 409);
  CHECK(http_status("wrong-state") == 409);
  CHECK(http_status("not-pending") == 409);
  CHECK(http_status("something-else") == 500);
}
