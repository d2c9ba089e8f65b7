#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace avglm {

// Fixed-length token rows plus the loss mask. Every row is a real-token
// prefix followed only by padding; mask is true exactly on non-pad cells.
struct EncodedBatch {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<int> tokens;         // rows × length, row-major
  std::vector<std::uint8_t> mask;  // rows × length

  int token(std::size_t r, std::size_t t) const { return tokens[r * length + t]; }
  bool masked(std::size_t r, std::size_t t) const { return mask[r * length + t] != 0; }
};

}  // namespace avglm
