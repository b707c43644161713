#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "ladabert/random.hpp"
#include "ladabert/svd.hpp"
#include "oracles.hpp"

using namespace ladabert;

namespace {

const Matrix kDiag321 = Matrix::from_rows({{3, 0, 0}, {0, 2, 0}, {0, 0, 1}});

double orthogonality_error(const Matrix& q) {
  return oracle::fro_diff(oracle::naive_matmul(oracle::naive_transpose(q), q),
                          Matrix::identity(q.cols()));
}

void expect_values(const std::vector<double>& got, const std::vector<double>& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(Svd, Identity) { expect_values(svd(Matrix::identity(3)).singular_values, {1, 1, 1}, 1e-14); }

TEST(Svd, DiagonalIsItsOwnSvd) { expect_values(svd(kDiag321).singular_values, {3, 2, 1}, 1e-14); }

TEST(Svd, RankDeficientTwoByTwo) {
  const SvdResult s = svd(Matrix::from_rows({{0, 2}, {0, 0}}));
  expect_values(s.singular_values, {2, 0}, 1e-14);
  EXPECT_LT(orthogonality_error(s.u), 1e-12);
  EXPECT_LT(orthogonality_error(s.v), 1e-12);
}

TEST(Svd, ZeroMatrixHasOrthonormalFactors) {
  const SvdResult s = svd(Matrix(4, 3));
  expect_values(s.singular_values, {0, 0, 0}, 0);
  EXPECT_LT(orthogonality_error(s.u), 1e-12);
  EXPECT_LT(orthogonality_error(s.v), 1e-12);
}

TEST(Svd, InvariantsOnRandomShapes) {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    Rng rng(seed);
    const std::size_t m = 1 + rng.below(20), n = 1 + rng.below(20);
    const Matrix w = oracle::gaussian(m, n, seed + 1000);
    const SvdResult s = svd(w);
    const std::size_t p = std::min(m, n);
    ASSERT_EQ(s.u.rows(), m);
    ASSERT_EQ(s.u.cols(), p);
    ASSERT_EQ(s.v.rows(), n);
    ASSERT_EQ(s.v.cols(), p);
    EXPECT_LT(orthogonality_error(s.u), 1e-8);
    EXPECT_LT(orthogonality_error(s.v), 1e-8);
    for (std::size_t i = 0; i < p; ++i) {
      EXPECT_GE(s.singular_values[i], 0.0);
      if (i > 0) {
        EXPECT_LE(s.singular_values[i], s.singular_values[i - 1]);
      }
    }
    EXPECT_LT(oracle::fro_diff(reconstruct(s), w) / oracle::fro(w), 1e-8);
    // Independent route: Eigen's two-sided Jacobi.
    expect_values(s.singular_values, oracle::singular_values(w), 1e-10);
  }
}

TEST(Svd, TransposeHasSameSingularValues) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix w = oracle::gaussian(3 + seed % 7, 2 + seed % 5, seed);
    expect_values(svd(oracle::naive_transpose(w)).singular_values, svd(w).singular_values, 1e-10);
  }
}

TEST(Svd, PositiveScalingScalesSingularValues) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix w = oracle::gaussian(6, 4 + seed % 5, seed);
    const double c = 0.25 + 0.5 * static_cast<double>(seed);
    std::vector<double> scaled = svd(w).singular_values;
    for (double& v : scaled) v *= c;
    expect_values(svd(c * w).singular_values, scaled, 1e-10 * (1 + c));
  }
}

TEST(Svd, DeterministicAndSignCanonical) {
  const Matrix w = oracle::gaussian(9, 5, 77);
  const SvdResult a = svd(w);
  const SvdResult b = svd(w);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.v, b.v);
  for (std::size_t k = 0; k < a.u.cols(); ++k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < a.u.rows(); ++i)
      if (std::abs(a.u(i, k)) > std::abs(a.u(best, k))) best = i;
    EXPECT_GE(a.u(best, k), 0.0);
  }
  // Flipping the sign of W flips V, not U.
  const SvdResult neg = svd(-1.0 * w);
  EXPECT_LT(oracle::fro_diff(neg.u, a.u), 1e-10);
  EXPECT_LT(oracle::fro_diff(neg.v, -1.0 * a.v), 1e-10);
}

TEST(Svd, ConvergenceErrorReportsResidual) {
  SvdOptions opt;
  opt.max_sweeps = 1;
  opt.tolerance = 1e-300;
  try {
    svd(oracle::gaussian(12, 12, 5), opt);
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.residual(), 0.0);
  }
}

TEST(Svd, RejectsEmpty) { EXPECT_THROW(svd(Matrix{}), ShapeError); }

TEST(Truncate, Examples) {
  const SvdResult s = svd(kDiag321);
  const SvdResult full = truncate(s, 3);
  EXPECT_EQ(full.singular_values, s.singular_values);
  EXPECT_EQ(full.u, s.u);
  const SvdResult top = truncate(s, 1);
  expect_values(top.singular_values, {3}, 1e-14);
  EXPECT_EQ(top.u.cols(), 1u);
  EXPECT_EQ(top.v.cols(), 1u);
  EXPECT_THROW(truncate(s, 0), RangeError);
  EXPECT_THROW(truncate(s, 4), RangeError);
}

TEST(TruncationError, Examples) {
  const SvdResult s = svd(kDiag321);
  EXPECT_NEAR(truncation_error(s, 3), 0.0, 1e-14);
  EXPECT_NEAR(truncation_error(s, 1), 2.2360680, 1e-7);
  EXPECT_NEAR(truncation_error(s, 2), 1.0, 1e-14);
  EXPECT_THROW(truncation_error(s, 0), RangeError);
}

TEST(EckartYoung, TruncationIsOptimalAgainstRandomFactors) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed + 500);
    const std::size_t m = 2 + rng.below(11), n = 2 + rng.below(11);
    const std::size_t r = 1 + rng.below(std::min(m, n));
    const Matrix w = oracle::gaussian(m, n, seed + 600);
    const SvdResult s = svd(w);
    const double best = truncation_error(s, r);
    EXPECT_NEAR(oracle::fro_diff(reconstruct(truncate(s, r)), w), best, 1e-8);
    for (int trial = 0; trial < 100; ++trial) {
      const Matrix a = random_normal(m, r, rng);
      const Matrix b = random_normal(n, r, rng);
      EXPECT_GE(oracle::fro_diff(oracle::naive_matmul(a, oracle::naive_transpose(b)), w),
                best - 1e-8);
    }
  }
}
