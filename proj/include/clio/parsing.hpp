#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clio/types.hpp"

namespace clio {

/// Structured replies are accepted either as a JSON object (optionally inside
/// a ``` fence) or as "key: value" lines. Keys are lower-cased and trimmed.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

std::optional<json> parse_json_object(std::string_view text);
KeyValues parse_key_values(std::string_view text);

std::optional<std::string> first_value(const KeyValues& kv, std::string_view key);
std::vector<std::string> all_values(const KeyValues& kv, std::string_view key);

/// Parses a whole string as a finite real ("0.92", "92%" is not accepted).
std::optional<double> parse_real(std::string_view text);

/// Splits on '|' and trims each part.
std::vector<std::string> split_bars(std::string_view text);

[[noreturn]] void malformed(const std::string& why);

}  // namespace clio
