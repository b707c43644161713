#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "ladabert/error.hpp"
#include "ladabert/factorize.hpp"
#include "ladabert/matrix.hpp"

namespace ladabert {

/// Binary keep-mask over a matrix (1 = keep).
class PruneMask {
 public:
  PruneMask() = default;
  PruneMask(std::size_t rows, std::size_t cols, bool fill)
      : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

  static PruneMask ones(std::size_t rows, std::size_t cols) { return {rows, cols, true}; }
  static PruneMask zeros(std::size_t rows, std::size_t cols) { return {rows, cols, false}; }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return bits_.size(); }

  bool operator()(std::size_t i, std::size_t j) const noexcept { return bits_[i * cols_ + j] != 0; }
  bool at_flat(std::size_t k) const noexcept { return bits_[k] != 0; }
  void set_flat(std::size_t k, bool on) noexcept { bits_[k] = on ? 1 : 0; }

  std::size_t count_ones() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  /// Fraction of entries kept, ||M||_1 / |M|.
  double kept_fraction() const noexcept {
    return bits_.empty() ? 0.0 : static_cast<double>(count_ones()) / static_cast<double>(size());
  }

  bool matches(const Matrix& m) const noexcept { return rows_ == m.rows() && cols_ == m.cols(); }

  friend bool operator==(const PruneMask&, const PruneMask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// round-half-up(p * n), the number of entries a mask with fraction p keeps.
inline std::size_t kept_count(double p, std::size_t n) {
  return static_cast<std::size_t>(std::floor(p * static_cast<double>(n) + 0.5));
}

/// Keeps the round(p * m * n) largest-|w| entries; among equal magnitudes the
/// earlier row-major index wins.
inline PruneMask magnitude_mask(const Matrix& w, double p_weight) {
  detail::require_fraction(p_weight, "magnitude_mask");
  const std::size_t n = w.size();
  const std::size_t k = std::min(kept_count(p_weight, n), n);
  PruneMask mask = PruneMask::zeros(w.rows(), w.cols());
  if (k == n) return PruneMask::ones(w.rows(), w.cols());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const auto data = w.data();
  auto before = [&](std::size_t a, std::size_t b) {
    const double fa = std::abs(data[a]);
    const double fb = std::abs(data[b]);
    return fa > fb || (fa == fb && a < b);
  };
  if (k > 0) {
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), before);
    for (std::size_t i = 0; i < k; ++i) mask.set_flat(idx[i], true);
  }
  return mask;
}

inline Matrix apply_mask(const Matrix& w, const PruneMask& mask) {
  if (!mask.matches(w)) {
    throw ShapeError("apply_mask: mask " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + " does not match " + w.shape_string());
  }
  Matrix out = w;
  auto d = out.data();
  for (std::size_t k = 0; k < d.size(); ++k) {
    if (!mask.at_flat(k)) d[k] = 0.0;
  }
  return out;
}

}  // namespace ladabert
