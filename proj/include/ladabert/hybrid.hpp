#pragma once

#include <cstddef>

#include "ladabert/factorize.hpp"
#include "ladabert/matrix.hpp"
#include "ladabert/prune.hpp"

namespace ladabert {

/// A weight matrix replaced by pruned low-rank factors:
///   W_hybrid = (M_A . A)(M_B . B)^T
struct FactoredLayer {
  LowRankPair pair;
  PruneMask mask_a;
  PruneMask mask_b;

  std::size_t rows() const noexcept { return pair.out_rows(); }
  std::size_t cols() const noexcept { return pair.out_cols(); }
  std::size_t rank() const noexcept { return pair.rank(); }

  /// Surviving factor entries.
  std::size_t retained_count() const noexcept {
    return mask_a.count_ones() + mask_b.count_ones();
  }
};

/// (m+n) r / (mn) * p_weight.
inline double hybrid_ratio(std::size_t m, std::size_t n, std::size_t r, double p_weight) {
  detail::require_fraction(p_weight, "hybrid_ratio");
  return factor_ratio(m, n, r) * p_weight;
}

/// Prunes both factors independently with the same retained fraction.
inline FactoredLayer prune_factors(LowRankPair pair, double p_weight) {
  PruneMask ma = magnitude_mask(pair.a, p_weight);
  PruneMask mb = magnitude_mask(pair.b, p_weight);
  pair.a = apply_mask(pair.a, ma);
  pair.b = apply_mask(pair.b, mb);
  return {std::move(pair), std::move(ma), std::move(mb)};
}

inline FactoredLayer compress_layer_rank(const Matrix& w, std::size_t r, double p_weight,
                                         Diagnostics* diag = nullptr) {
  detail::require_fraction(p_weight, "compress_layer");
  return prune_factors(factorize_rank(w, r, diag), p_weight);
}

/// Factorize at p_svd, then magnitude-prune A and B at p_weight.
inline FactoredLayer compress_layer(const Matrix& w, double p_svd, double p_weight,
                                    Diagnostics* diag = nullptr) {
  return compress_layer_rank(w, rank_for_ratio(w.rows(), w.cols(), p_svd), p_weight, diag);
}

inline Matrix effective_weight(const FactoredLayer& layer) {
  return matmul_bt(apply_mask(layer.pair.a, layer.mask_a), apply_mask(layer.pair.b, layer.mask_b));
}

}  // namespace ladabert
