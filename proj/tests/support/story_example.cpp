#include "story_example.hpp"

#include <regex>

#include "proutt/rng.hpp"

namespace proutt::testing {

const char* const kChosenSentenceAnalysis =
    "[Sentence Type Analysis]: The user may issue an instruction based on the converted story. They could ask the "
    "assistant to make further modifications, such as changing the tone of the story, adding more details, or "
    "converting it to a different style. They might also ask for another related task, such as producing a summary "
    "of the first-person version. Therefore, the sentence type for the user's next input is most likely Instruction.";

const char* const kRejectedSentenceAnalysis =
    "[Sentence Type Analysis]: The user may provide a statement about their thoughts on the converted story, such as "
    "expressing their opinion on the quality of the conversion, how much they like the first-person version, or "
    "giving general feedback about the story's content from the new perspective. Since the assistant has just "
    "completed the conversion task, the user might want to share their feelings or observations in a "
    "non-interrogative and non-directive way. Therefore, the sentence category for the user's next input is most "
    "likely Statement.";

const char* const kMiningAnalysis =
    "[Mining View Analysis]: In the mining view, we focus on identifying new attributes or modifying existing "
    "attribute values under the current StoryConversion topic. The user has already converted a story from third "
    "person to first person. One possible new attribute is the output style, such as converting the story to a more "
    "formal style. The corresponding intent tree mining path would be: <<PATH>>StoryConversion → OutputStyle - "
    "Formal<</PATH>>. Another option is to change the target point of view to second person. The intent tree mining "
    "path for this would be: <<PATH>>StoryConversion → TargetPOV - Second person<</PATH>>. These predictions follow "
    "from the user's interest in story conversion and the potential for further adjustments within the same topic.";

const char* const kExplorationAnalysis =
    "[Exploration View Analysis]: For the exploration view, we look for new topics that are closely related to the "
    "existing StoryConversion topic. One such new topic is story summarization. After converting the story, the user "
    "might want to summarize it to obtain a concise version, which leads to the exploration path "
    "<<PATH>>StoryConversion → StorySummarization - SummaryLength<</PATH>>. Another new topic is story translation. "
    "Since the user is working with a story, they might want to translate it into another language, yielding the "
    "exploration path <<PATH>>StoryConversion → StoryTranslation - TargetLanguage<</PATH>>. These predictions expand "
    "on the user's engagement with the story beyond conversion alone.";

namespace {

constexpr const char* kStoryText =
    "Once upon a time, in a big forest, there lived a rhinoceros named NAME_1. NAME_1 loved to climb. One day she "
    "found an icy hill and could not climb it until her friend NAME_2 the bird helped her. And NAME_1 learned that "
    "with a little help from a friend, she could climb anything.";

bool has(const std::string& s, std::string_view needle) { return s.find(needle) != std::string::npos; }

}  // namespace

Dialogue story_dialogue() {
  Dialogue d;
  d.id = "story";
  d.turns.push_back({1, std::string("Convert this short story to first person point of view. Story: ") + kStoryText,
                     "I am NAME_1, the rhinoceros. I am living in a big, beautiful forest. One day, I found an icy "
                     "hill that I had never seen before. And I learned that with a little help from a friend, I "
                     "could climb anything."});
  d.turns.push_back({2, kStoryGt,
                     "You are NAME_1, the rhinoceros. You live in a big, beautiful forest. One day, you find an icy "
                     "hill that you have never seen before."});
  return d;
}

std::uint64_t story_seed() {
  // Rejected type is drawn first from {declarative, interrogative}.
  for (std::uint64_t s = 0;; ++s) {
    Rng rng(derive_seed(s, "story", 1));
    if (rng.uniform_index(2) == 0) return s;
  }
}

std::optional<std::string> story_reply(std::string_view tag_in, const std::string& prompt) {
  std::string tag(tag_in);
  if (tag.ends_with(".repair")) tag.resize(tag.size() - 7);
  if (!has(prompt, "rhinoceros named NAME_1")) return std::nullopt;

  if (tag == "tree_build")
    return "[User Intent Tree]:\nStoryConversion@1 {\n    OriginalPOV@1: Third person,\n    TargetPOV@1: First "
           "person,\n    Story@1: Rhinoceros NAME_1 tries to climb icy hill, fails, gets help from bird NAME_2, "
           "climbs it and they become friends.,\n    TargetPOV@2: Second person\n}";
  if (tag == "sentence_type.imperative") return kChosenSentenceAnalysis;
  if (tag == "sentence_type.declarative") return kRejectedSentenceAnalysis;
  if (tag == "sentence_type.interrogative")
    return "[Sentence Type Analysis]: The user may ask a question about the converted story. Therefore, the "
           "sentence type for the user's next input is most likely Question.";
  if (tag == "path_reason.exploit") return kMiningAnalysis;
  if (tag == "path_reason.explore") return kExplorationAnalysis;
  if (tag == "alternative_path") {
    static const std::regex count_re(R"((?:exactly|Give) (\d+))");
    std::smatch m;
    const bool one = std::regex_search(prompt, m, count_re) && m[1] == "1";
    std::string out = "<<PATH>>StoryConversion → AuthorName<</PATH>> asks about who wrote the story.";
    if (!one) out += "\n<<PATH>>StoryConversion → OriginalPOV: No person<</PATH>> changes the original point of view.";
    return out;
  }
  if (tag == "verbalize" && has(prompt, "AuthorName"))
    return "The user's next input is most likely one of the following:\n"
           "1. I want to know the author of this story.\n"
           "2. I want to convert the story with the original point of view as no person to first person.\n"
           "3. Summarize the story.\n"
           "4. Translate the story into another language.";
  if (tag == "verbalize" || tag == "verbalize_approx")
    return "The user's next input is most likely one of the following:\n"
           "1. Convert the story to a formal style.\n"
           "2. Convert the story to second person point of view.\n"
           "3. Summarize the story.\n"
           "4. Translate the story into another language.";
  if (tag == "judge_pointwise")
    return has(prompt, "Predicted next user input:\nConvert the story to second person point of view.")
               ? "Same request with a different pronoun.\nScore: 0.9"
               : "Different intent.\nScore: 0.2";
  return std::nullopt;
}

}  // namespace proutt::testing
