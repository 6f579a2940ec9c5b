#pragma once

#include <functional>
#include <map>
#include <string>

#include "proutt/gateway.hpp"
#include "scripted.hpp"

namespace proutt::testing {

/// Embedder backed by hash_embedding, with per-text overrides.
class HashEmbedder : public llm::Embedder {
 public:
  std::map<std::string, llm::Vector> fixed;
  int calls = 0;

  std::vector<llm::Vector> embed(const std::vector<std::string>& texts) override {
    std::vector<llm::Vector> out;
    for (const auto& t : texts) {
      ++calls;
      auto it = fixed.find(t);
      out.push_back(it != fixed.end() ? it->second : hash_embedding(t));
    }
    return out;
  }
};

}  // namespace proutt::testing
