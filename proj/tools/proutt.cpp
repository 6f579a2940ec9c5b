// proutt command-line entry point.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "proutt/annotate.hpp"
#include "proutt/corpus.hpp"
#include "proutt/dataset.hpp"
#include "proutt/error.hpp"
#include "proutt/evalkit.hpp"
#include "proutt/gateway.hpp"
#include "proutt/intent.hpp"
#include "proutt/promptkit.hpp"
#include "proutt/synthesis.hpp"

namespace {

using nlohmann::json;
using namespace proutt;

struct GatewayFlags {
  std::string mode = "live";
  std::string cassette;
  std::string base_url;
  int max_in_flight = 8;

  void add(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "live, record or replay")
        ->check(CLI::IsMember({"live", "record", "replay"}));
    cmd->add_option("--cassette", cassette, "cassette JSONL for record/replay");
    cmd->add_option("--base-url", base_url, "OpenAI-compatible endpoint (overrides PROUTT_BASE_URL)");
    cmd->add_option("--max-in-flight", max_in_flight, "concurrent request bound")->check(CLI::PositiveNumber);
  }

  llm::Gateway make() const {
    llm::GatewayConfig cfg;
    cfg.apply_environment();
    if (!base_url.empty()) cfg.base_url = base_url;
    cfg.mode = llm::mode_from_string(mode);
    if (!cassette.empty()) cfg.cassette_path = cassette;
    if (cfg.mode != llm::Mode::live && !cfg.cassette_path)
      throw UsageError("usage", "--cassette is required in " + mode + " mode");
    cfg.max_in_flight = max_in_flight;
    return llm::Gateway(cfg);
  }
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io-error", "cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_json(const std::string& path, const json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("io-error", "cannot write " + path);
  f << j.dump(2) << '\n';
}

const PromptRegistry& registry(const std::string& manifest, std::optional<PromptRegistry>& storage) {
  if (manifest.empty()) return PromptRegistry::builtin();
  storage = PromptRegistry::load(manifest);
  return *storage;
}

std::vector<Dialogue> load_dialogues(const std::string& path, const std::string& format, const std::string& source,
                                     const std::string& language, bool strict) {
  LoadOptions opts;
  if (!source.empty()) opts.source = source_from_string(source);
  if (!language.empty()) opts.language = language_from_string(language);
  opts.strict = strict;
  LoadReport report;
  auto dialogues = load_corpus(path, corpus_format_from_string(format), opts, &report);
  spdlog::info("loaded {} dialogues from {} conversations ({} too short, {} system messages dropped)",
               report.dialogues, report.conversations, report.skipped_short, report.system_messages_dropped);
  return dialogues;
}

std::atomic<annotate::Server*> g_server{nullptr};

void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference data synthesis and evaluation for next-utterance prediction"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off");

  // synthesize
  auto* syn = app.add_subcommand("synthesize", "corpus -> preference records JSONL + run report");
  std::string corpus, format = "jsonl", source, language, config_path, out, report_path, templates;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau_high, tau_low;
  std::optional<int> q;
  std::string style, model, judge_model, embed_model;
  int workers = 1;
  std::size_t limit = 0;
  bool strict = false, perturb_all = false, regenerate_preferred = false;
  GatewayFlags syn_gw;
  syn->add_option("--corpus", corpus, "dialogue corpus")->required();
  syn->add_option("--format", format, "jsonl, sharegpt or crosswoz");
  syn->add_option("--source", source, "source tag (lmsys, sharegpt, wildchat, crosswoz, custom)");
  syn->add_option("--language", language, "en or zh");
  syn->add_flag("--strict", strict, "reject role-order violations");
  syn->add_option("--config", config_path, "SynthesisConfig JSON");
  syn->add_option("--seed", seed, "base seed");
  syn->add_option("--tau-high", tau_high);
  syn->add_option("--tau-low", tau_low);
  syn->add_option("--q", q, "candidates per perspective");
  syn->add_option("--instruction-style", style)->check(CLI::IsMember({"structured", "minimal"}));
  syn->add_option("--model", model, "model for the tree, reason and verbalize roles");
  syn->add_option("--judge-model", judge_model);
  syn->add_option("--embed-model", embed_model);
  syn->add_flag("--perturb-all", perturb_all, "replace every candidate in the ground-truth perspective");
  syn->add_flag("--regenerate-preferred", regenerate_preferred,
                "verbalize preferred responses again instead of reusing the matched candidate");
  syn->add_option("--limit", limit, "use only the first N dialogues");
  syn->add_option("--workers", workers)->check(CLI::PositiveNumber);
  syn->add_option("--templates", templates, "template manifest (default: built-in)");
  syn->add_option("--out", out, "records JSONL")->required();
  syn->add_option("--report", report_path, "run report JSON (default: <out>.report.json)");
  syn_gw.add(syn);

  // tree-build
  auto* tb = app.add_subcommand("tree-build", "corpus -> intent trees JSONL");
  std::string tb_corpus, tb_format = "jsonl", tb_out, tb_model, tb_templates;
  GatewayFlags tb_gw;
  tb->add_option("--corpus", tb_corpus)->required();
  tb->add_option("--format", tb_format);
  tb->add_option("--model", tb_model);
  tb->add_option("--templates", tb_templates);
  tb->add_option("--out", tb_out)->required();
  tb_gw.add(tb);

  // stats
  auto* st = app.add_subcommand("stats", "records -> statistics JSON");
  std::string st_in, st_tokenizer = "whitespace", st_out;
  st->add_option("--in", st_in)->required();
  st->add_option("--tokenizer", st_tokenizer, "whitespace or cmd:<command>");
  st->add_option("--out", st_out, "output path (default: stdout)");

  // export-dpo
  auto* dpo = app.add_subcommand("export-dpo", "records -> prompt/chosen/rejected JSONL");
  std::string dpo_in, dpo_out;
  dpo->add_option("--in", dpo_in)->required();
  dpo->add_option("--out", dpo_out)->required();

  // eval-pointwise
  auto* ep = app.add_subcommand("eval-pointwise", "LLM-judge and embedding similarity of predictions");
  std::string ep_test, ep_pred, ep_out, ep_judge, ep_embed, ep_templates;
  int ep_repeats = 5, ep_workers = 1;
  GatewayFlags ep_gw;
  ep->add_option("--test", ep_test)->required();
  ep->add_option("--predictions", ep_pred)->required();
  ep->add_option("--judge-model", ep_judge);
  ep->add_option("--embed-model", ep_embed);
  ep->add_option("--repeats", ep_repeats)->check(CLI::PositiveNumber);
  ep->add_option("--workers", ep_workers)->check(CLI::PositiveNumber);
  ep->add_option("--templates", ep_templates);
  ep->add_option("--out", ep_out);
  ep_gw.add(ep);

  // eval-pairwise
  auto* epw = app.add_subcommand("eval-pairwise", "win/tie/loss of system A against system B");
  std::string pw_test, pw_a, pw_b, pw_out, pw_judge, pw_templates, pw_verdicts;
  std::uint64_t pw_seed = 0;
  int pw_workers = 1;
  bool pw_audit = false;
  GatewayFlags pw_gw;
  epw->add_option("--test", pw_test)->required();
  epw->add_option("--system-a", pw_a)->required();
  epw->add_option("--system-b", pw_b)->required();
  epw->add_option("--judge-model", pw_judge);
  epw->add_option("--seed", pw_seed);
  epw->add_option("--workers", pw_workers)->check(CLI::PositiveNumber);
  epw->add_option("--templates", pw_templates);
  epw->add_flag("--audit", pw_audit, "include the per-item swap audit");
  epw->add_option("--verdicts-out", pw_verdicts, "per-item outcomes JSONL for annotate-report");
  epw->add_option("--out", pw_out);
  pw_gw.add(epw);

  // annotate-serve
  auto* as = app.add_subcommand("annotate-serve", "serve the pairwise annotation API");
  std::string as_host = "127.0.0.1", as_store, as_static;
  int as_port = 8080;
  as->add_option("--host", as_host);
  as->add_option("--port", as_port)->check(CLI::Range(0, 65535));
  as->add_option("--store", as_store, "event log JSONL")->required();
  as->add_option("--static-dir", as_static, "annotation UI bundle");

  // annotate-report
  auto* ar = app.add_subcommand("annotate-report", "final verdicts of a finalized batch");
  std::string ar_store, ar_batch, ar_llm, ar_out;
  ar->add_option("--store", ar_store)->required();
  ar->add_option("--batch", ar_batch)->required();
  ar->add_option("--llm-verdicts", ar_llm, "LLM outcomes JSONL {id, outcome} for consistency");
  ar->add_option("--out", ar_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  auto logger = spdlog::stderr_color_mt("proutt");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*syn) {
      SynthesisConfig cfg;
      if (!config_path.empty()) cfg = config_from_json(json::parse(read_file(config_path)), cfg);
      if (!model.empty())
        cfg.models.tree.model_id = cfg.models.reason.model_id = cfg.models.verbalize.model_id = model;
      if (!judge_model.empty()) cfg.models.judge.model_id = judge_model;
      if (!embed_model.empty()) cfg.models.embed = embed_model;
      if (seed) cfg.seed = *seed;
      if (tau_high) cfg.tau_high = *tau_high;
      if (tau_low) cfg.tau_low = *tau_low;
      if (q) cfg.q_per_perspective = *q;
      if (!style.empty()) cfg.instruction_style = instruction_style_from_string(style);
      if (perturb_all) cfg.perturb_all_in_perspective = true;
      if (regenerate_preferred) cfg.reuse_matched_candidate = false;
      cfg.validate();

      auto dialogues = load_dialogues(corpus, format, source, language, strict);
      if (limit > 0) dialogues = sample_dialogues(std::move(dialogues), limit, std::nullopt);
      std::optional<PromptRegistry> owned;
      const auto& prompts = registry(templates, owned);
      auto gateway = syn_gw.make();
      auto [records, report] = synthesize_corpus(dialogues, cfg, gateway, prompts, workers);
      write_records(out, records);
      write_json(report_path.empty() ? out + ".report.json" : report_path, to_json(report));
      spdlog::info("wrote {} records ({} failures)", records.size(), report.failures.size());
      return 0;
    }

    if (*tb) {
      auto dialogues = load_dialogues(tb_corpus, tb_format, "", "", false);
      std::optional<PromptRegistry> owned;
      const auto& prompts = registry(tb_templates, owned);
      auto gateway = tb_gw.make();
      llm::ModelParams params{tb_model, 0.8, 1.0, 2048};
      std::ofstream f(tb_out, std::ios::binary | std::ios::trunc);
      if (!f) throw Error("io-error", "cannot write " + tb_out);
      std::size_t failed = 0;
      for (const auto& d : dialogues) {
        try {
          const IntentTree tree = build_intent_tree(d, gateway, prompts, params);
          json per_turn = json::object();
          for (const auto& [turn, paths] : extract_new_paths(tree)) per_turn[std::to_string(turn)] = paths;
          f << json{{"dialogue_id", d.id}, {"tree", tree}, {"text", render_tree(tree, true)}, {"per_turn", per_turn}}
                   .dump()
            << '\n';
        } catch (const Error& e) {
          ++failed;
          spdlog::warn("tree for {} failed ({}): {}", d.id, e.kind(), e.what());
        }
      }
      spdlog::info("built {} trees, {} failed", dialogues.size() - failed, failed);
      return 0;
    }

    if (*st) {
      Tokenizer tok = whitespace_tokenizer();
      if (st_tokenizer.rfind("cmd:", 0) == 0) tok = subprocess_tokenizer(st_tokenizer.substr(4));
      else if (st_tokenizer != "whitespace") throw UsageError("usage", "unknown tokenizer " + st_tokenizer);
      write_json(st_out, to_json(compute_stats(read_records(st_in), tok)));
      return 0;
    }

    if (*dpo) {
      const auto n = export_dpo(read_records(dpo_in), dpo_out);
      spdlog::info("exported {} triples", n);
      return 0;
    }

    if (*ep) {
      std::optional<PromptRegistry> owned;
      const auto& prompts = registry(ep_templates, owned);
      auto gateway = ep_gw.make();
      eval::PointwiseOptions opts;
      opts.judge.model_id = ep_judge;
      opts.embed_model = ep_embed;
      opts.repeats = ep_repeats;
      opts.workers = ep_workers;
      const auto result =
          eval::evaluate_pointwise(eval::load_test_set(ep_test), eval::load_predictions(ep_pred), gateway, prompts, opts);
      write_json(ep_out, {{"pointwise", eval::to_json(result)}});
      return 0;
    }

    if (*epw) {
      std::optional<PromptRegistry> owned;
      const auto& prompts = registry(pw_templates, owned);
      auto gateway = pw_gw.make();
      llm::ModelParams judge{pw_judge, 0.0, 1.0, 256};
      const auto result = eval::evaluate_pairwise(eval::load_test_set(pw_test), eval::load_predictions(pw_a),
                                                  eval::load_predictions(pw_b), gateway, prompts, judge, pw_seed,
                                                  pw_workers);
      if (!pw_verdicts.empty()) {
        std::ofstream f(pw_verdicts, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("io-error", "cannot write " + pw_verdicts);
        for (std::size_t i = 0; i < result.audit.size(); ++i)
          f << json{{"id", result.audit[i].item_id}, {"outcome", eval::to_string(result.outcomes[i])}}.dump() << '\n';
      }
      write_json(pw_out, {{"pairwise", eval::to_json(result, pw_audit)}});
      return 0;
    }

    if (*as) {
      annotate::Store store(as_store);
      std::optional<std::filesystem::path> dir;
      if (!as_static.empty()) dir = as_static;
      annotate::Server server(store, dir);
      const int port = server.bind(as_host, as_port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      spdlog::info("annotation service on http://{}:{}", as_host, port);
      std::printf("listening on %d\n", port);
      std::fflush(stdout);
      server.listen();
      g_server = nullptr;
      return 0;
    }

    if (*ar) {
      if (!std::filesystem::exists(ar_store)) throw UsageError("usage", "no event log at " + ar_store);
      annotate::Store store(ar_store);
      std::optional<std::map<std::string, eval::Outcome>> llm;
      if (!ar_llm.empty()) llm = annotate::load_llm_verdicts(ar_llm);
      const auto report = store.report(ar_batch, llm ? &*llm : nullptr);
      json j = annotate::to_json(report);
      json finals = json::array();
      const auto items = store.items(ar_batch);
      for (std::size_t i = 0; i < items.size(); ++i)
        finals.push_back({{"id", items[i].item_id}, {"outcome", eval::to_string(report.finals[i])}});
      j["finals"] = finals;
      write_json(ar_out, j);
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error (" << e.kind() << "): " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const Error& e) {
    spdlog::error("{}: {}", e.kind(), e.what());
    return 2;
  } catch (const json::exception& e) {
    spdlog::error("invalid JSON: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 1;
}
