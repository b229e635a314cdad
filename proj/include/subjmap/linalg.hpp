#pragma once

// Dense row-major matrix plus the handful of factorizations the rest of the
// library needs. Heavy lifting is delegated to Eigen through zero-copy maps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "subjmap/errors.hpp"
#include "subjmap/rng.hpp"

namespace subjmap {

using EigenRowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<EigenRowMatrix>;
using ConstEigenMap = Eigen::Map<const EigenRowMatrix>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ShapeError("ragged initializer list");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_eigen(const EigenRowMatrix& e) {
    Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    m.eigen() = e;
    return m;
  }

  template <typename Derived>
  static Matrix from_eigen(const Eigen::MatrixBase<Derived>& e) {
    return from_eigen(EigenRowMatrix(e));
  }

  static Matrix gaussian(std::size_t rows, std::size_t cols, SeededRng& rng, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (auto& v : m.data_) v = rng.normal() * stddev;
    return m;
  }

  static Matrix uniform(std::size_t rows, std::size_t cols, SeededRng& rng, double lo, double hi) {
    Matrix m(rows, cols);
    for (auto& v : m.data_) v = rng.uniform(lo, hi);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  EigenMap eigen() {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }
  ConstEigenMap eigen() const {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  Matrix col(std::size_t c) const {
    Matrix out(rows_, 1);
    for (std::size_t r = 0; r < rows_; ++r) out(r, 0) = (*this)(r, c);
    return out;
  }

  Matrix rows_subset(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), cols_);
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(idx[i] * cols_), cols_,
                  out.data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
    return out;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }

  bool operator==(const Matrix& o) const = default;

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (rows_ != o.rows_ || cols_ != o.cols_)
      throw ShapeError(std::string(op) + " on " + shape_string() + " and " + o.shape_string());
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// a · b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul " + a.shape_string() + " by " + b.shape_string());
  Matrix out(a.rows(), b.cols());
  out.eigen().noalias() = a.eigen() * b.eigen();
  return out;
}

/// aᵀ · b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows())
    throw ShapeError("matmul_tn " + a.shape_string() + " by " + b.shape_string());
  Matrix out(a.cols(), b.cols());
  out.eigen().noalias() = a.eigen().transpose() * b.eigen();
  return out;
}

/// a · bᵀ
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt " + a.shape_string() + " by " + b.shape_string());
  Matrix out(a.rows(), b.rows());
  out.eigen().noalias() = a.eigen() * b.eigen().transpose();
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("hadamard " + a.shape_string() + " and " + b.shape_string());
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
  return out;
}

/// Adds a 1×c row vector to every row.
inline void add_row_vector(Matrix& m, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != m.cols())
    throw ShapeError("bias " + row.shape_string() + " for " + m.shape_string());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto dst = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) dst[c] += row(0, c);
  }
}

/// Sum over rows, as a 1×c matrix.
inline Matrix column_sums(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto src = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) out(0, c) += src[c];
  }
  return out;
}

inline Matrix column_means(const Matrix& m) {
  Matrix out = column_sums(m);
  if (m.rows() > 0) out *= 1.0 / static_cast<double>(m.rows());
  return out;
}

inline Matrix center_columns(const Matrix& m) {
  Matrix out = m;
  Matrix mean = column_means(m);
  mean *= -1.0;
  add_row_vector(out, mean);
  return out;
}

inline double frobenius_norm(const Matrix& m) { return m.eigen().norm(); }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("max_abs_diff " + a.shape_string() + " and " + b.shape_string());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

/// Orthonormal basis of the column space of `m` (rows ≥ cols) via Householder
/// QR. Columns are sign-fixed so the implicit R has a positive diagonal,
/// which makes the operation idempotent.
inline Matrix qr_orthonormalize(const Matrix& m) {
  const std::size_t r = m.rows();
  const std::size_t c = m.cols();
  if (r < c) throw DimensionError("qr_orthonormalize needs rows >= cols, got " + m.shape_string());
  Eigen::HouseholderQR<EigenRowMatrix> qr(m.eigen());
  const EigenRowMatrix rfac = qr.matrixQR().template triangularView<Eigen::Upper>();
  const double scale = std::max(1.0, m.max_abs());
  for (std::size_t j = 0; j < c; ++j) {
    if (std::abs(rfac(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j))) < 1e-12 * scale)
      throw RankDeficient("pivot " + std::to_string(j) + " below 1e-12");
  }
  EigenRowMatrix q = qr.householderQ() * EigenRowMatrix::Identity(static_cast<Eigen::Index>(r),
                                                                    static_cast<Eigen::Index>(c));
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(c); ++j)
    if (rfac(j, j) < 0.0) q.col(j) *= -1.0;
  return Matrix::from_eigen(q);
}

struct SvdResult {
  Matrix u;                    // r × k
  std::vector<double> s;       // k, non-increasing
  Matrix vt;                   // k × c
};

/// Thin SVD for matrices up to 512 on a side (one-sided Jacobi).
inline SvdResult svd_small(const Matrix& m) {
  if (m.rows() > 512 || m.cols() > 512)
    throw DimensionError("svd_small limited to 512x512, got " + m.shape_string());
  if (!m.all_finite()) throw DimensionError("svd_small input has non-finite entries");
  Eigen::JacobiSVD<EigenRowMatrix> svd(m.eigen(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult out;
  out.u = Matrix::from_eigen(svd.matrixU());
  out.vt = Matrix::from_eigen(EigenRowMatrix(svd.matrixV().transpose()));
  const auto& sv = svd.singularValues();
  out.s.assign(sv.data(), sv.data() + sv.size());

  EigenRowMatrix recon = svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
  const double residual = (recon - m.eigen()).cwiseAbs().maxCoeff();
  const double bound = 1e-8 * std::max(m.max_abs(), 1e-300);
  if (m.max_abs() > 0.0 && residual >= bound)
    throw ConvergenceError("svd_small residual " + std::to_string(residual));
  return out;
}

struct PcaResult {
  Matrix components;                    // d × k, orthonormal columns
  Matrix scores;                        // n × k
  std::vector<double> explained_variance;
  double total_variance = 0.0;
  Matrix mean;                          // 1 × d
};

/// Principal components of the rows of `x`. Each component is sign-fixed so
/// its largest-magnitude entry is positive.
inline PcaResult pca(const Matrix& x, std::size_t k) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n < 2) throw DimensionError("pca needs at least 2 rows");
  if (k == 0 || k > std::min(n, d))
    throw DimensionError("pca k=" + std::to_string(k) + " out of range for " + x.shape_string());

  PcaResult out;
  out.mean = column_means(x);
  const Matrix centered = center_columns(x);
  const EigenRowMatrix cov =
      (centered.eigen().transpose() * centered.eigen()) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<EigenRowMatrix> eig(cov);
  const auto& evals = eig.eigenvalues();
  const auto& evecs = eig.eigenvectors();

  out.total_variance = cov.trace();
  out.components = Matrix(d, k);
  for (std::size_t j = 0; j < k; ++j) {
    const Eigen::Index src = static_cast<Eigen::Index>(d - 1 - j);
    out.explained_variance.push_back(std::max(0.0, evals(src)));
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double a = std::abs(evecs(static_cast<Eigen::Index>(i), src));
      if (a > best + 1e-12) {
        best = a;
        arg = i;
      }
    }
    const double sign = evecs(static_cast<Eigen::Index>(arg), src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < d; ++i)
      out.components(i, j) = sign * evecs(static_cast<Eigen::Index>(i), src);
  }
  out.scores = matmul(centered, out.components);
  return out;
}

}  // namespace subjmap
