#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace proutt::text {

std::string trim(std::string_view s);

/// Case-fold (ASCII), trim, and collapse internal whitespace runs to one space.
std::string normalize(std::string_view s);

/// True when normalize(needle) is a non-empty substring of normalize(haystack).
bool contains_normalized(std::string_view haystack, std::string_view needle);

std::string to_lower(std::string_view s);

std::vector<std::string> split_whitespace(std::string_view s);

/// Number of UTF-8 code points; invalid lead bytes count as one each.
std::size_t utf8_length(std::string_view s);

bool starts_with_icase(std::string_view s, std::string_view prefix);

/// Replace every occurrence of `from` with `to`.
std::string replace_all(std::string s, std::string_view from, std::string_view to);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

}  // namespace proutt::text
