#pragma once

#include <array>
#include <string_view>

namespace proutt {

enum class SentenceType { declarative, imperative, interrogative };

inline constexpr std::array<SentenceType, 3> kSentenceTypes{
    SentenceType::declarative, SentenceType::imperative, SentenceType::interrogative};

std::string_view to_string(SentenceType t);
SentenceType sentence_type_from_string(std::string_view s);

/// Wording used in prompts and model analyses: Statement, Instruction, Question.
std::string_view analysis_label(SentenceType t);

}  // namespace proutt
