#include "clio/parsing.hpp"

#include <cctype>
#include <charconv>
#include <cmath>

#include "clio/error.hpp"

namespace clio {

std::optional<json> parse_json_object(std::string_view text) {
  auto body = trim(text);
  if (body.rfind("```", 0) == 0) {
    auto first_newline = body.find('\n');
    auto closing = body.rfind("```");
    if (first_newline == std::string::npos || closing <= first_newline) return std::nullopt;
    body = trim(std::string_view(body).substr(first_newline + 1, closing - first_newline - 1));
  }
  if (body.empty() || body.front() != '{') return std::nullopt;
  auto parsed = json::parse(body, nullptr, false);
  if (parsed.is_discarded() || !parsed.is_object()) return std::nullopt;
  return parsed;
}

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = trim(text.substr(pos, end - pos));
    // Tolerate list markers and markdown emphasis around keys.
    while (!line.empty() && (line.front() == '-' || line.front() == '*')) line = trim(line.substr(1));
    auto colon = line.find(':');
    if (colon != std::string::npos && colon > 0) {
      std::string key = to_lower(trim(line.substr(0, colon)));
      std::erase(key, '*');
      for (auto& c : key)
        if (c == ' ') c = '_';
      out.emplace_back(std::move(key), trim(line.substr(colon + 1)));
    }
    pos = end + 1;
  }
  return out;
}

std::optional<std::string> first_value(const KeyValues& kv, std::string_view key) {
  for (const auto& [k, v] : kv)
    if (k == key) return v;
  return std::nullopt;
}

std::vector<std::string> all_values(const KeyValues& kv, std::string_view key) {
  std::vector<std::string> out;
  for (const auto& [k, v] : kv)
    if (k == key) out.push_back(v);
  return out;
}

std::optional<double> parse_real(std::string_view text) {
  auto t = trim(text);
  if (t.empty()) return std::nullopt;
  double value = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc{} || ptr != t.data() + t.size() || !std::isfinite(value)) return std::nullopt;
  return value;
}

std::vector<std::string> split_bars(std::string_view text) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  for (;;) {
    auto bar = text.find('|', pos);
    parts.push_back(trim(text.substr(pos, bar == std::string_view::npos ? text.npos : bar - pos)));
    if (bar == std::string_view::npos) break;
    pos = bar + 1;
  }
  return parts;
}

void malformed(const std::string& why) {
  throw Error(Errc::malformed_response, why);
}

}  // namespace clio
