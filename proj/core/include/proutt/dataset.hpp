#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "proutt/synthesis.hpp"

namespace proutt {

// ---------------------------------------------------------------------------
// Record I/O
// ---------------------------------------------------------------------------

nlohmann::json record_to_json(const PreferenceRecord& record);
/// Throws ParseError("schema-violation"). With `strict`, unknown keys are
/// rejected as well.
PreferenceRecord record_from_json(const nlohmann::json& j, bool strict = true);

void write_records(const std::filesystem::path& path, const std::vector<PreferenceRecord>& records);
/// JSONL serialization, one record per line, each line newline-terminated.
std::string serialize_records(const std::vector<PreferenceRecord>& records);

/// Errors name the 1-based line number.
std::vector<PreferenceRecord> read_records(const std::filesystem::path& path, bool strict = true);
std::vector<PreferenceRecord> parse_records(std::string_view jsonl, bool strict = true,
                                            std::string_view origin = "<memory>");

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Counts tokens in a text.
struct Tokenizer {
  std::string id;
  std::function<std::size_t(std::string_view)> count;
};

Tokenizer whitespace_tokenizer();

/// Runs `command` once per text with the text on stdin; the command prints
/// the token count. Throws Error("tokenizer-failed") on a bad exit or output.
Tokenizer subprocess_tokenizer(std::string command);

struct StatsReport {
  std::size_t sample_count = 0;
  double avg_chars = 0.0;
  double avg_tokens = 0.0;
  double delta_chars_mean = 0.0;
  double delta_tokens_mean = 0.0;
  double delta_tokens_std = 0.0;  ///< population form
  std::int64_t delta_tokens_max_abs = 0;
  std::string tokenizer_id;
};

nlohmann::json to_json(const StatsReport& s);

/// Text measured for one side of a record: sentence reasoning, both path
/// analyses and the responses, joined by newlines.
std::string trajectory_text(const Trajectory& t);

/// Δ = chosen − rejected per record over trajectory_text; averages of chars
/// and tokens run over all 2n texts.
StatsReport compute_stats(const std::vector<PreferenceRecord>& records, const Tokenizer& tokenizer);

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

struct DpoTriple {
  std::string prompt;
  std::string chosen;
  std::string rejected;
};

DpoTriple to_dpo(const PreferenceRecord& record);
/// Returns the number of lines written.
std::size_t export_dpo(const std::vector<PreferenceRecord>& records, const std::filesystem::path& path);

/// Seeded shuffle, then the first round(fraction * n) records go to the first part.
std::pair<std::vector<PreferenceRecord>, std::vector<PreferenceRecord>> split_records(
    std::vector<PreferenceRecord> records, double fraction, std::uint64_t seed);

}  // namespace proutt
