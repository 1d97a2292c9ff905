#include "clio/embedder.hpp"

#include <cctype>
#include <cmath>
#include <map>

namespace clio {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<std::string> HashEmbedder::tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

EmbeddingVector HashEmbedder::embed(std::string_view text) const {
  auto tokens = tokenize(text);
  if (tokens.empty() && !text.empty()) tokens.emplace_back(text);

  std::map<std::string, int> counts;
  for (auto& t : tokens) ++counts[t];

  EmbeddingVector out;
  out.values.assign(dimension_, 0.0);
  for (const auto& [token, count] : counts) {
    std::uint64_t state = fnv1a64(token);
    for (std::size_t i = 0; i < dimension_; ++i) {
      // Uniform in [-1, 1).
      const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
      out.values[i] += count * (2.0 * u - 1.0);
    }
  }
  double norm = 0;
  for (double v : out.values) norm += v * v;
  if (norm > 0) {
    norm = std::sqrt(norm);
    for (double& v : out.values) v /= norm;
  }
  return out;
}

std::vector<EmbeddingVector> HashEmbedder::embed(const std::vector<std::string>& texts) const {
  std::vector<EmbeddingVector> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(embed(t));
  return out;
}

}  // namespace clio
