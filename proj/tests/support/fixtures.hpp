#pragma once

#include <string>

#include "proutt/intent.hpp"
#include "proutt/rng.hpp"

namespace proutt::testing {

/// Tree text from the story-conversion preference example.
inline constexpr const char* kStoryTree =
    "StoryConversion {\n"
    "    OriginalPOV: Third person,\n"
    "    TargetPOV: First person,\n"
    "    Story: Rhinoceros NAME_1 tries to climb icy hill, fails, gets help from bird NAME_2, climbs it and they "
    "become friends.\n"
    "}";

/// Valid random tree whose labels and values use every escapable character.
IntentTree random_tree(Rng& rng);

}  // namespace proutt::testing
