#include "fixtures.hpp"

#include <set>

#include "proutt/text.hpp"

namespace proutt::testing {

namespace {

std::string random_text(Rng& rng, bool allow_newline) {
  static const std::string alphabet = "abcXYZ019 _-.,:{}@\\→é";
  const std::size_t len = 1 + rng.uniform_index(12);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) {
    if (allow_newline && rng.uniform_index(20) == 0) {
      s += '\n';
      continue;
    }
    // Multi-byte glyphs are drawn whole.
    const std::size_t pick = rng.uniform_index(22);
    if (pick == 20) s += "→";
    else if (pick == 21) s += "é";
    else s += alphabet[pick];
  }
  s = text::trim(s);
  return s.empty() ? "x" : s;
}

}  // namespace

IntentTree random_tree(Rng& rng) {
  IntentTree t;
  std::set<std::string> seen;
  const std::size_t topics = 1 + rng.uniform_index(4);
  while (t.topics.size() < topics) {
    IntentNode topic{random_text(rng, false), std::nullopt, 1 + static_cast<int>(rng.uniform_index(5)), {}};
    if (!seen.insert(text::normalize(topic.label)).second) continue;
    const std::size_t attrs = rng.uniform_index(5);
    for (std::size_t a = 0; a < attrs; ++a) {
      IntentNode attr{random_text(rng, false), std::nullopt, 1 + static_cast<int>(rng.uniform_index(8)), {}};
      if (rng.uniform_index(4) != 0) attr.value = random_text(rng, true);
      topic.children.push_back(std::move(attr));
    }
    t.topics.push_back(std::move(topic));
  }
  return t;
}

}  // namespace proutt::testing
