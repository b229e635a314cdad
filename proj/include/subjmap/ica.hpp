#pragma once

// FastICA with symmetric decorrelation and the logcosh contrast (α = 1).
// Rows of X are observations, columns are samples (voxels in spatial ICA).

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Eigenvalues>

#include "subjmap/errors.hpp"
#include "subjmap/linalg.hpp"
#include "subjmap/rng.hpp"

namespace subjmap {

struct IcaOptions {
  std::size_t k = 8;
  std::uint64_t seed = 0;
  std::size_t max_iter = 1000;
  double tol = 1e-8;
};

struct ICAResult {
  Matrix sources;    // k×N, zero mean and unit variance per row
  Matrix mixing;     // n×k, X_centered ≈ mixing · sources
  Matrix unmixing;   // k×k, acts on whitened data
  Matrix whitening;  // k×n
  Matrix row_means;  // n×1
  std::vector<std::size_t> iterations;  // per component; symmetric updates share one count
  bool converged = false;               // false means max_iter was hit
};

namespace detail {

/// (W Wᵀ)^{-1/2} W
inline EigenRowMatrix symmetric_decorrelate(const EigenRowMatrix& w) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w * w.transpose());
  const Eigen::VectorXd inv_sqrt = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * w;
}

}  // namespace detail

inline ICAResult fastica(const Matrix& x, const IcaOptions& opt = {}) {
  const std::size_t n = x.rows();
  const std::size_t samples = x.cols();
  if (opt.k == 0 || n <= opt.k || samples < opt.k)
    throw DimensionError("fastica needs n > k and N >= k, got " + x.shape_string() + " with k=" +
                         std::to_string(opt.k));
  const auto k = static_cast<Eigen::Index>(opt.k);
  const double ns = static_cast<double>(samples);

  ICAResult r;
  r.row_means = Matrix(n, 1);
  EigenRowMatrix xc = x.eigen();
  for (Eigen::Index i = 0; i < xc.rows(); ++i) {
    const double m = xc.row(i).mean();
    r.row_means(static_cast<std::size_t>(i), 0) = m;
    xc.row(i).array() -= m;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(xc * xc.transpose() / ns);
  // Eigen sorts ascending; take the top k.
  const Eigen::VectorXd evals = es.eigenvalues().tail(k).reverse();
  const Eigen::MatrixXd evecs = es.eigenvectors().rightCols(k).rowwise().reverse();
  if (!(evals(k - 1) > 1e-12 * std::max(1.0, evals(0))))
    throw RankDeficient("data rank is below k=" + std::to_string(opt.k));
  const EigenRowMatrix whiten = evals.cwiseSqrt().cwiseInverse().asDiagonal() * evecs.transpose();
  const EigenRowMatrix xw = whiten * xc;

  SeededRng rng(opt.seed);
  EigenRowMatrix w(k, k);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) w(i, j) = rng.normal();
  w = detail::symmetric_decorrelate(w);

  std::size_t it = 0;
  for (; it < opt.max_iter; ++it) {
    const EigenRowMatrix y = w * xw;
    const EigenRowMatrix g = y.array().tanh();
    const Eigen::VectorXd g_prime_mean = (1.0 - g.array().square()).rowwise().mean();
    EigenRowMatrix w_new = g * xw.transpose() / ns - g_prime_mean.asDiagonal() * w;
    w_new = detail::symmetric_decorrelate(w_new);
    const double lim = (1.0 - (w_new * w.transpose()).diagonal().array().abs()).abs().maxCoeff();
    w = w_new;
    if (lim < opt.tol) {
      r.converged = true;
      ++it;
      break;
    }
  }
  r.iterations.assign(opt.k, it);

  EigenRowMatrix s = w * xw;
  EigenRowMatrix a = evecs * evals.cwiseSqrt().asDiagonal() * w.transpose();
  // Sign convention: the largest-magnitude entry of each source is positive.
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index arg = 0;
    s.row(c).cwiseAbs().maxCoeff(&arg);
    if (s(c, arg) < 0.0) {
      s.row(c) *= -1.0;
      a.col(c) *= -1.0;
      w.row(c) *= -1.0;
    }
  }
  r.sources = Matrix::from_eigen(s);
  r.mixing = Matrix::from_eigen(a);
  r.unmixing = Matrix::from_eigen(w);
  r.whitening = Matrix::from_eigen(whiten);
  return r;
}

}  // namespace subjmap
