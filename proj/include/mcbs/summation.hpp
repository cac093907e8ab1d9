#pragma once

#include <cstddef>

namespace mcbs {

/// Pairwise (tree) summation of term(0) + ... + term(n-1).
/// The reduction tree depends only on n, so results are reproducible bit-for-bit.
/// T needs a value-initialized zero and operator+=.
template <typename T, typename Term>
T pairwise_sum(std::size_t begin, std::size_t end, const Term& term) {
  constexpr std::size_t kLeaf = 32;
  if (end - begin <= kLeaf) {
    T acc{};
    for (std::size_t i = begin; i < end; ++i) acc += term(i);
    return acc;
  }
  const std::size_t mid = begin + (end - begin) / 2;
  T left = pairwise_sum<T>(begin, mid, term);
  left += pairwise_sum<T>(mid, end, term);
  return left;
}

template <typename T, typename Term>
T pairwise_sum(std::size_t n, const Term& term) {
  return pairwise_sum<T>(std::size_t{0}, n, term);
}

}  // namespace mcbs
