#pragma once

#include <string_view>
#include <vector>

#include "clio/model.hpp"

namespace clio {

/// Deterministic local embedder: each token of the (lower-cased, alphanumeric)
/// token multiset seeds a pseudo-random projection; the vector is their
/// count-weighted sum, L2-normalised. Same text, same vector, on every platform.
class HashEmbedder {
 public:
  explicit HashEmbedder(std::size_t dimension = 64) : dimension_(dimension) {}

  EmbeddingVector embed(std::string_view text) const;
  std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) const;

  std::size_t dimension() const noexcept { return dimension_; }

  static std::vector<std::string> tokenize(std::string_view text);

 private:
  std::size_t dimension_;
};

}  // namespace clio
