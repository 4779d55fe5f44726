#pragma once

// Minimal comma-separated text helpers shared by the dataset loader and the
// exporters. Double-quoted fields with "" escapes are understood; nothing else
// about RFC 4180 is.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace latentq::csv {

/// Splits one line into fields. Surrounding whitespace is trimmed from
/// unquoted fields.
std::vector<std::string> split_line(std::string_view line);

/// Reads every non-empty line of a file, split into fields. Strips a UTF-8
/// byte-order mark and trailing carriage returns.
std::vector<std::vector<std::string>> read_file(const std::filesystem::path& path);

/// Quotes a field only if it contains a comma, quote or newline.
std::string escape(std::string_view field);

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);

/// Fixed-point text with `digits` decimals.
std::string format_fixed(double value, int digits);

/// Parses the whole of `text` as a double. Returns false on trailing junk.
bool parse_double(std::string_view text, double& value);

bool is_missing_token(std::string_view text);

std::string trim(std::string_view text);

}  // namespace latentq::csv
