#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "subjmap/linalg.hpp"
#include "subjmap/rng.hpp"

using namespace subjmap;

namespace {

// Oracle: explicit Gram matrix QᵀQ by triple loop.
Matrix gram(const Matrix& q) {
  Matrix g(q.cols(), q.cols());
  for (std::size_t i = 0; i < q.cols(); ++i)
    for (std::size_t j = 0; j < q.cols(); ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < q.rows(); ++r) s += q(r, i) * q(r, j);
      g(i, j) = s;
    }
  return g;
}

double max_dev_from_identity(const Matrix& g) {
  double worst = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) worst = std::max(worst, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return worst;
}

// Oracle: eigenvalues of a symmetric PSD matrix by power iteration with
// Hotelling deflation.
std::vector<double> power_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<double> out;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i * i + k);
    double lambda = 0.0;
    for (int it = 0; it < 20000; ++it) {
      std::vector<double> w(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) w[i] += a[i][j] * v[j];
      double norm = 0.0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) break;
      for (auto& x : w) x /= norm;
      double next = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) next += w[i] * a[i][j] * w[j];
      v = w;
      if (std::abs(next - lambda) < 1e-15 * std::max(1.0, std::abs(next)) && it > 50) {
        lambda = next;
        break;
      }
      lambda = next;
    }
    out.push_back(lambda);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) a[i][j] -= lambda * v[i] * v[j];
  }
  std::sort(out.rbegin(), out.rend());
  return out;
}

}  // namespace

TEST(Rng, EqualSeedsGiveEqualStreams) {
  SeededRng a(123), b(123);
  for (int i = 0; i < 10000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DifferentSeedsDiffer) {
  SeededRng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64();
  EXPECT_LT(same, 2);
}

TEST(Rng, UniformAndNormalMoments) {
  SeededRng rng(99);
  const int n = 200000;
  double su = 0.0, sn = 0.0, sn2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, DeriveSeedDependsOnTag) {
  EXPECT_NE(derive_seed(5, "init"), derive_seed(5, "train"));
  EXPECT_EQ(derive_seed(5, "init"), derive_seed(5, "init"));
  EXPECT_NE(derive_seed(5, "init"), derive_seed(6, "init"));
}

TEST(Matrix, ShapeAndArithmetic) {
  Matrix a{{1, 2}, {3, 4}};
  Matrix b{{5, 6}, {7, 8}};
  EXPECT_EQ(a.rows(), 2u);
  EXPECT_EQ(a.values().size(), a.rows() * a.cols());
  EXPECT_EQ(matmul(a, b), (Matrix{{19, 22}, {43, 50}}));
  EXPECT_EQ(matmul_tn(a, b), matmul(a.transpose(), b));
  EXPECT_EQ(matmul_nt(a, b), matmul(a, b.transpose()));
  EXPECT_EQ(a + b, (Matrix{{6, 8}, {10, 12}}));
  EXPECT_THROW(matmul(a, Matrix(3, 1)), ShapeError);
}

TEST(QrOrthonormalize, IdentityIsFixed) {
  EXPECT_LT(max_abs_diff(qr_orthonormalize(Matrix::identity(3)), Matrix::identity(3)), 1e-15);
}

TEST(QrOrthonormalize, ColumnScalingRemoved) {
  const Matrix q = qr_orthonormalize(Matrix{{2, 0}, {0, 3}, {0, 0}});
  EXPECT_LT(max_abs_diff(q, Matrix{{1, 0}, {0, 1}, {0, 0}}), 1e-15);
}

TEST(QrOrthonormalize, RandomTallMatrixIsOrthonormal) {
  SeededRng rng(7);
  const Matrix m = Matrix::gaussian(8, 4, rng);
  const Matrix q = qr_orthonormalize(m);
  EXPECT_LT(max_dev_from_identity(gram(q)), 1e-10);
  // Same span: M = Q·(QᵀM) exactly when span(Q) = span(M).
  EXPECT_LT(max_abs_diff(matmul(q, matmul_tn(q, m)), m), 1e-10);
  // Positive diagonal of R = QᵀM.
  const Matrix r = matmul_tn(q, m);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_GT(r(i, i), 0.0);
}

TEST(QrOrthonormalize, IdempotentUpToSign) {
  SeededRng rng(8);
  const Matrix q1 = qr_orthonormalize(Matrix::gaussian(6, 6, rng));
  EXPECT_LT(max_abs_diff(qr_orthonormalize(q1), q1), 1e-10);
}

TEST(QrOrthonormalize, RankDeficientThrows) {
  EXPECT_THROW(qr_orthonormalize(Matrix{{1, 2}, {2, 4}, {3, 6}}), RankDeficient);
  EXPECT_THROW(qr_orthonormalize(Matrix(3, 4)), DimensionError);
}

TEST(Pca, LineCapturesAllVariance) {
  Matrix x(50, 2);
  for (std::size_t i = 0; i < 50; ++i) {
    x(i, 0) = 3.0 + 0.1 * static_cast<double>(i);
    x(i, 1) = -1.0 + 0.2 * static_cast<double>(i);
  }
  const PcaResult p = pca(x, 1);
  EXPECT_GE(p.explained_variance[0] / p.total_variance, 0.999);
}

TEST(Pca, IsotropicGaussianMatchesCovarianceOracle) {
  SeededRng rng(3);
  const Matrix x = Matrix::gaussian(500, 2, rng);
  const PcaResult p = pca(x, 2);
  // Oracle: closed-form eigenvalues of the 2×2 sample covariance.
  double m0 = 0, m1 = 0;
  for (std::size_t i = 0; i < 500; ++i) {
    m0 += x(i, 0) / 500.0;
    m1 += x(i, 1) / 500.0;
  }
  double a = 0, b = 0, c = 0;
  for (std::size_t i = 0; i < 500; ++i) {
    a += (x(i, 0) - m0) * (x(i, 0) - m0) / 499.0;
    b += (x(i, 0) - m0) * (x(i, 1) - m1) / 499.0;
    c += (x(i, 1) - m1) * (x(i, 1) - m1) / 499.0;
  }
  const double mid = 0.5 * (a + c);
  const double rad = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
  EXPECT_NEAR(p.explained_variance[0], mid + rad, 1e-10);
  EXPECT_NEAR(p.explained_variance[1], mid - rad, 1e-10);
  const double total = p.explained_variance[0] + p.explained_variance[1];
  for (double ev : p.explained_variance) {
    EXPECT_GE(ev / total, 0.4);
    EXPECT_LE(ev / total, 0.6);
  }
}

TEST(Pca, ScoresAreCenteredAndCenteringIdempotent) {
  SeededRng rng(4);
  Matrix x = Matrix::gaussian(40, 5, rng);
  for (std::size_t i = 0; i < 40; ++i) x(i, 2) += 7.0;
  const PcaResult p = pca(x, 3);
  const Matrix means = column_means(p.scores);
  for (double v : means.values()) EXPECT_LT(std::abs(v), 1e-10);
  const PcaResult q = pca(center_columns(x), 3);
  EXPECT_LT(max_abs_diff(p.scores, q.scores), 1e-10);
  // Orthonormal components, non-increasing variance, sign convention.
  EXPECT_LT(max_dev_from_identity(gram(p.components)), 1e-10);
  for (std::size_t k = 1; k < 3; ++k) EXPECT_GE(p.explained_variance[k - 1], p.explained_variance[k]);
  for (std::size_t k = 0; k < 3; ++k) {
    double best = 0.0;
    for (std::size_t r = 0; r < 5; ++r)
      if (std::abs(p.components(r, k)) > std::abs(best)) best = p.components(r, k);
    EXPECT_GT(best, 0.0);
  }
}

TEST(Pca, RejectsBadK) {
  EXPECT_THROW(pca(Matrix(10, 3), 4), DimensionError);
  EXPECT_THROW(pca(Matrix(10, 3), 0), DimensionError);
  EXPECT_THROW(pca(Matrix(1, 3), 1), DimensionError);
}

TEST(SvdSmall, DiagonalMatrix) {
  const SvdResult r = svd_small(Matrix{{3, 0, 0}, {0, 2, 0}, {0, 0, 1}});
  ASSERT_EQ(r.s.size(), 3u);
  EXPECT_NEAR(r.s[0], 3.0, 1e-14);
  EXPECT_NEAR(r.s[1], 2.0, 1e-14);
  EXPECT_NEAR(r.s[2], 1.0, 1e-14);
}

TEST(SvdSmall, ZeroMatrix) {
  const SvdResult r = svd_small(Matrix(4, 3));
  for (double v : r.s) EXPECT_EQ(v, 0.0);
  EXPECT_LT(max_dev_from_identity(gram(r.u)), 1e-12);
}

TEST(SvdSmall, RandomReconstructs) {
  SeededRng rng(11);
  const Matrix m = Matrix::gaussian(6, 4, rng);
  const SvdResult r = svd_small(m);
  Matrix us = r.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= r.s[j];
  EXPECT_LT(max_abs_diff(matmul(us, r.vt), m), 1e-8 * m.max_abs());
  for (std::size_t k = 1; k < r.s.size(); ++k) EXPECT_GE(r.s[k - 1], r.s[k]);
  for (double v : r.s) EXPECT_GE(v, 0.0);
  EXPECT_LT(max_dev_from_identity(gram(r.u)), 1e-10);
  EXPECT_LT(max_dev_from_identity(gram(r.vt.transpose())), 1e-10);
}

TEST(SvdSmall, SingularValuesMatchPowerIterationOracle) {
  SeededRng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix m = Matrix::gaussian(5, 5, rng);
    const Matrix mtm = matmul_tn(m, m);
    std::vector<std::vector<double>> a(5, std::vector<double>(5));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) a[i][j] = mtm(i, j);
    const auto eig = power_eigenvalues(a);
    const SvdResult r = svd_small(m);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(r.s[k], std::sqrt(std::max(0.0, eig[k])), 1e-6);
  }
}

TEST(SvdSmall, SizeLimit) { EXPECT_THROW(svd_small(Matrix(513, 2)), DimensionError); }
