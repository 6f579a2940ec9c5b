#pragma once

#include <atomic>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "proutt/corpus.hpp"
#include "proutt/gateway.hpp"

namespace proutt::testing {

/// A fixture dialogue plus what the scripted model "knows" about it.
struct ScriptedDialogue {
  Dialogue dialogue;
  std::string tree_text;     // turn-tagged tree returned by tree_build
  std::string anchor_topic;  // topic introduced at turn 1
  std::vector<double> peaks; // judge peak score per K, cycled
};

/// `count` dialogues with `turns` turns. Dialogue i gets judge peaks
/// `peak_cycle` rotated by i.
std::vector<ScriptedDialogue> make_corpus(int count, int turns,
                                          std::vector<double> peak_cycle = {0.9, 0.5, 0.2});

std::vector<Dialogue> dialogues_of(const std::vector<ScriptedDialogue>& s);

/// 256-dim signed bag-of-words hash embedding, unit length.
llm::Vector hash_embedding(std::string_view text);

/// Token overlap between two texts (Jaccard over lowercased words).
double overlap(std::string_view a, std::string_view b);

/// OpenAI-compatible fake that answers every pipeline prompt from the
/// fixture. Requests are identified by the X-Request-Tag header.
class ScriptedBackend : public llm::Transport {
 public:
  /// Return a reply to replace the scripted one for (tag, user prompt).
  using Override = std::function<std::optional<std::string>(std::string_view tag, const std::string& prompt)>;

  explicit ScriptedBackend(std::vector<ScriptedDialogue> dialogues = {});

  llm::HttpResponse post(const llm::HttpRequest& request) override;

  /// Reply content for one chat prompt (system + user joined).
  std::string reply(std::string_view tag, const std::string& prompt) const;

  void set_override(Override o) {
    std::lock_guard lock(mu_);
    override_ = std::move(o);
  }

  std::atomic<int> calls{0};

 private:
  const ScriptedDialogue* find_dialogue(const std::string& prompt) const;

  std::vector<ScriptedDialogue> dialogues_;
  mutable std::mutex mu_;
  Override override_;
};

/// Transport that fails the test run if it is ever used.
class NoNetwork : public llm::Transport {
 public:
  llm::HttpResponse post(const llm::HttpRequest& request) override;
  std::atomic<int> calls{0};
};

}  // namespace proutt::testing
