#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <vector>

#include "ladabert/error.hpp"
#include "ladabert/matrix.hpp"

namespace ladabert {

/// Thin SVD  W = U diag(singular_values) V^T  with p = min(m, n) triples,
/// singular values non-increasing.
struct SvdResult {
  Matrix u;                            // m x p
  std::vector<double> singular_values;  // p
  Matrix v;                            // n x p

  std::size_t rank() const noexcept { return singular_values.size(); }
};

struct SvdOptions {
  /// Converged once every column pair has |<g_i, g_j>| / (|g_i| |g_j|) below this.
  double tolerance = 1e-12;
  int max_sweeps = 60;
};

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
  return s;
}

inline void rotate(double* a, double* b, std::size_t n, double c, double s) {
  for (std::size_t k = 0; k < n; ++k) {
    const double x = a[k];
    const double y = b[k];
    a[k] = c * x - s * y;
    b[k] = s * x + c * y;
  }
}

// One-sided (Hestenes) Jacobi on a matrix with rows >= cols. Works on the
// columns of W stored as rows of `g` (cols x rows) so each column is contiguous.
inline SvdResult jacobi_tall(const Matrix& w, const SvdOptions& opt) {
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  Matrix g = transpose(w);
  Matrix vt = Matrix::identity(n);

  double coherence = 0.0;
  bool converged = n < 2;
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    coherence = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double* gi = g.row(i).data();
        double* gj = g.row(j).data();
        const double alpha = dot(gi, gi, m);
        const double beta = dot(gj, gj, m);
        const double gamma = dot(gi, gj, m);
        if (alpha == 0.0 || beta == 0.0 || gamma == 0.0) continue;
        const double c_ij = std::abs(gamma) / std::sqrt(alpha * beta);
        coherence = std::max(coherence, c_ij);
        if (c_ij <= opt.tolerance) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::abs(zeta) > 1e150
                             ? 0.5 / zeta
                             : std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(gi, gj, m, c, s);
        rotate(vt.row(i).data(), vt.row(j).data(), n, c, s);
      }
    }
    converged = coherence < opt.tolerance;
  }
  if (!converged) {
    std::ostringstream os;
    os << "svd: no convergence after " << opt.max_sweeps << " sweeps on " << w.shape_string()
       << " input, residual off-diagonal coherence " << coherence;
    throw ConvergenceError(os.str(), coherence);
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(dot(g.row(j).data(), g.row(j).data(), m));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  const double sigma_max = norms[order[0]];
  std::vector<std::size_t> degenerate;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    const double sigma = norms[j];
    out.singular_values[k] = sigma;
    for (std::size_t r = 0; r < n; ++r) out.v(r, k) = vt(j, r);
    if (sigma == 0.0 || sigma < sigma_max * 1e-14) {
      degenerate.push_back(k);
      continue;
    }
    for (std::size_t r = 0; r < m; ++r) out.u(r, k) = g(j, r) / sigma;
  }

  // Null-space columns of U: complete with Gram-Schmidt over the standard basis.
  std::size_t basis = 0;
  for (std::size_t k : degenerate) {
    for (; basis < m; ++basis) {
      std::vector<double> cand(m, 0.0);
      cand[basis] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t q = 0; q < n; ++q) {
          if (q == k) continue;
          if (std::find(degenerate.begin(), degenerate.end(), q) != degenerate.end() && q > k) {
            continue;
          }
          double proj = 0.0;
          for (std::size_t r = 0; r < m; ++r) proj += cand[r] * out.u(r, q);
          for (std::size_t r = 0; r < m; ++r) cand[r] -= proj * out.u(r, q);
        }
      }
      const double norm = std::sqrt(dot(cand.data(), cand.data(), m));
      if (norm > 0.5) {
        for (std::size_t r = 0; r < m; ++r) out.u(r, k) = cand[r] / norm;
        ++basis;
        break;
      }
    }
  }
  return out;
}

// Largest-magnitude entry of every U column is made non-negative.
inline void canonicalize_signs(SvdResult& s) {
  for (std::size_t k = 0; k < s.rank(); ++k) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < s.u.rows(); ++r) {
      if (std::abs(s.u(r, k)) > std::abs(s.u(best, k))) best = r;
    }
    if (s.u(best, k) < 0.0) {
      for (std::size_t r = 0; r < s.u.rows(); ++r) s.u(r, k) = -s.u(r, k);
      for (std::size_t r = 0; r < s.v.rows(); ++r) s.v(r, k) = -s.v(r, k);
    }
  }
}

}  // namespace detail

/// Singular value decomposition by cyclic one-sided Jacobi sweeps.
/// Wide inputs are decomposed through their transpose.
inline SvdResult svd(const Matrix& w, const SvdOptions& opt = {}) {
  if (w.empty()) throw ShapeError("svd: empty matrix");
  check_finite(w, "svd");
  SvdResult out;
  if (w.rows() >= w.cols()) {
    out = detail::jacobi_tall(w, opt);
  } else {
    SvdResult t = detail::jacobi_tall(transpose(w), opt);
    out = SvdResult{std::move(t.v), std::move(t.singular_values), std::move(t.u)};
  }
  detail::canonicalize_signs(out);
  return out;
}

/// Keeps the leading r singular triples.
inline SvdResult truncate(const SvdResult& s, std::size_t r) {
  if (r < 1 || r > s.rank()) {
    throw RangeError("truncate: rank " + std::to_string(r) + " outside [1, " +
                     std::to_string(s.rank()) + "]");
  }
  SvdResult out{Matrix(s.u.rows(), r), {s.singular_values.begin(), s.singular_values.begin() + r},
                Matrix(s.v.rows(), r)};
  for (std::size_t i = 0; i < s.u.rows(); ++i)
    for (std::size_t k = 0; k < r; ++k) out.u(i, k) = s.u(i, k);
  for (std::size_t i = 0; i < s.v.rows(); ++i)
    for (std::size_t k = 0; k < r; ++k) out.v(i, k) = s.v(i, k);
  return out;
}

/// Frobenius error of the best rank-r approximation: sqrt(sum_{i>r} sigma_i^2).
inline double truncation_error(const SvdResult& s, std::size_t r) {
  if (r < 1 || r > s.rank()) {
    throw RangeError("truncation_error: rank " + std::to_string(r) + " outside [1, " +
                     std::to_string(s.rank()) + "]");
  }
  double sum = 0.0;
  for (std::size_t i = r; i < s.rank(); ++i) sum += s.singular_values[i] * s.singular_values[i];
  return std::sqrt(sum);
}

/// U diag(sigma) V^T.
inline Matrix reconstruct(const SvdResult& s) {
  Matrix us = s.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < s.rank(); ++k) us(i, k) *= s.singular_values[k];
  return matmul_bt(us, s.v);
}

}  // namespace ladabert
