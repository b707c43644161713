#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "ladabert/error.hpp"
#include "ladabert/matrix.hpp"
#include "ladabert/svd.hpp"

namespace ladabert {

/// Non-fatal findings collected while planning or compressing.
struct Diagnostics {
  std::vector<std::string> warnings;

  void warn(std::string msg) { warnings.push_back(std::move(msg)); }
  bool empty() const noexcept { return warnings.empty(); }
};

/// W ~= A B^T with A: m x r, B: n x r.
struct LowRankPair {
  Matrix a;
  Matrix b;

  std::size_t rank() const noexcept { return a.cols(); }
  std::size_t out_rows() const noexcept { return a.rows(); }
  std::size_t out_cols() const noexcept { return b.rows(); }
};

namespace detail {

inline void require_fraction(double p, const char* what) {
  if (!(p > 0.0 && p <= 1.0)) {
    std::ostringstream os;
    os << what << ": fraction " << p << " outside (0, 1]";
    throw RangeError(os.str());
  }
}

}  // namespace detail

/// Storage of a rank-r factor pair relative to the dense m x n matrix: (m+n)r/(mn).
inline double factor_ratio(std::size_t m, std::size_t n, std::size_t r) {
  if (m == 0 || n == 0 || r < 1 || r > std::min(m, n)) {
    throw RangeError("factor_ratio: rank " + std::to_string(r) + " invalid for " +
                     std::to_string(m) + "x" + std::to_string(n));
  }
  return static_cast<double>((m + n) * r) / static_cast<double>(m * n);
}

/// Largest rank whose factor storage stays within `p_svd` of the dense matrix:
/// max(1, floor(mn/(m+n) * p_svd)), capped at min(m, n).
inline std::size_t rank_for_ratio(std::size_t m, std::size_t n, double p_svd) {
  if (m == 0 || n == 0) throw RangeError("rank_for_ratio: empty shape");
  detail::require_fraction(p_svd, "rank_for_ratio");
  const double exact = static_cast<double>(m) * static_cast<double>(n) /
                       static_cast<double>(m + n) * p_svd;
  // Absorb round-off so that exact integers (e.g. 384 * 0.5) do not floor down.
  const auto r = static_cast<std::size_t>(std::floor(exact * (1.0 + 1e-12)));
  return std::clamp<std::size_t>(r, 1, std::min(m, n));
}

/// Balanced split of the top-r triples: A = U_r sqrt(S_r), B = V_r sqrt(S_r).
inline LowRankPair factorize_rank(const Matrix& w, std::size_t r, Diagnostics* diag = nullptr) {
  const SvdResult s = truncate(svd(w), r);
  LowRankPair pair{s.u, s.v};
  for (std::size_t k = 0; k < r; ++k) {
    const double root = std::sqrt(s.singular_values[k]);
    for (std::size_t i = 0; i < pair.a.rows(); ++i) pair.a(i, k) *= root;
    for (std::size_t i = 0; i < pair.b.rows(); ++i) pair.b(i, k) *= root;
  }
  if (diag != nullptr) {
    const double ratio = factor_ratio(w.rows(), w.cols(), r);
    if (ratio > 1.0) {
      std::ostringstream os;
      os << "rank-" << r << " factors of a " << w.shape_string() << " matrix store " << ratio
         << "x the dense parameters";
      diag->warn(os.str());
    }
  }
  return pair;
}

inline LowRankPair factorize_layer(const Matrix& w, double p_svd, Diagnostics* diag = nullptr) {
  return factorize_rank(w, rank_for_ratio(w.rows(), w.cols(), p_svd), diag);
}

/// A B^T.
inline Matrix reconstruct(const LowRankPair& pair) { return matmul_bt(pair.a, pair.b); }

}  // namespace ladabert
