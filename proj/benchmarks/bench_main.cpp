#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "proutt/evalkit.hpp"
#include "proutt/gateway.hpp"
#include "proutt/intent.hpp"
#include "proutt/rng.hpp"

using namespace proutt;

namespace {

// Topics x attributes, each attribute with two nested values.
IntentTree wide_tree(int topics, int attributes) {
  IntentTree t;
  for (int i = 0; i < topics; ++i) {
    IntentNode topic{"Topic" + std::to_string(i), std::nullopt, 1 + i % 4, {}};
    for (int j = 0; j < attributes; ++j) {
      IntentNode attr{"Attribute " + std::to_string(j), "value, with {braces}", 1 + j % 4, {}};
      attr.children.push_back({"Detail", "nested " + std::to_string(j), 2, {}});
      topic.children.push_back(std::move(attr));
    }
    t.topics.push_back(std::move(topic));
  }
  return t;
}

void BM_ParseTree(benchmark::State& state) {
  const auto text = render_tree(wide_tree(static_cast<int>(state.range(0)), 8), true);
  for (auto _ : state) benchmark::DoNotOptimize(parse_tree_text(text));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * text.size()));
}
BENCHMARK(BM_ParseTree)->Arg(1)->Arg(8)->Arg(64);

void BM_RenderTree(benchmark::State& state) {
  const auto tree = wide_tree(static_cast<int>(state.range(0)), 8);
  for (auto _ : state) benchmark::DoNotOptimize(render_tree(tree, true));
}
BENCHMARK(BM_RenderTree)->Arg(8)->Arg(64);

void BM_CanonicalHash(benchmark::State& state) {
  llm::ChatRequest req;
  req.model_id = "judge-model";
  req.temperature = 0.0;
  req.messages.push_back({llm::Role::system, "You are a careful evaluator."});
  req.messages.push_back({llm::Role::user, std::string(static_cast<std::size_t>(state.range(0)), 'x')});
  for (auto _ : state) benchmark::DoNotOptimize(llm::canonical_hash(req));
  state.SetBytesProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_CanonicalHash)->Arg(256)->Arg(8192)->Arg(65536);

void BM_CohenKappa(benchmark::State& state) {
  Rng rng(1);
  std::vector<eval::Outcome> a, b;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    a.push_back(static_cast<eval::Outcome>(rng.uniform_index(3)));
    b.push_back(static_cast<eval::Outcome>(rng.uniform_index(3)));
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval::cohen_kappa(a, b));
}
BENCHMARK(BM_CohenKappa)->Arg(100)->Arg(10000);

void BM_KappaBootstrap(benchmark::State& state) {
  Rng rng(2);
  std::vector<eval::Outcome> a, b;
  for (int i = 0; i < 500; ++i) {
    a.push_back(static_cast<eval::Outcome>(rng.uniform_index(3)));
    b.push_back(rng.uniform_index(4) == 0 ? static_cast<eval::Outcome>(rng.uniform_index(3)) : a.back());
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval::consistency_report(a, b, 1, 1000));
}
BENCHMARK(BM_KappaBootstrap);

}  // namespace
BENCHMARK_MAIN();
