#pragma once

// Downstream evaluation: kernel probe classification, reconstruction
// improvement, subject-weight PCA and circle fitting.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subjmap/errors.hpp"
#include "subjmap/linalg.hpp"
#include "subjmap/models.hpp"
#include "subjmap/rng.hpp"

namespace subjmap {

struct ProbeResult {
  std::vector<double> fold_accuracies;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t n_folds = 0;
  std::string label_name;
};

inline nlohmann::json to_json(const ProbeResult& r) {
  return {{"fold_accuracies", r.fold_accuracies}, {"mean", r.mean},      {"std", r.stddev},
          {"n_folds", r.n_folds},                 {"label_name", r.label_name}};
}

struct ProbeOptions {
  std::size_t n_folds = 5;
  std::optional<double> gamma;  // nullopt = 1 / (d · var(embeddings))
  double ridge = 1e-3;
  std::uint64_t seed = 0;
  std::string label_name = "label";
};

/// Stratified fold id per row: each class is shuffled with the seed and dealt
/// round-robin across folds.
inline std::vector<std::size_t> stratified_folds(std::span<const int> labels, std::size_t n_folds,
                                                 std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  SeededRng rng(seed);
  std::vector<std::size_t> fold(labels.size());
  std::size_t offset = 0;
  for (auto& [cls, idx] : by_class) {
    rng.shuffle(idx);
    for (std::size_t k = 0; k < idx.size(); ++k) fold[idx[k]] = (offset + k) % n_folds;
    offset += idx.size();
  }
  return fold;
}

/// Squared Euclidean distances between the rows of a and b.
inline Matrix squared_distances(const Matrix& a, const Matrix& b) {
  Matrix d(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) {
        const double diff = ai[k] - bj[k];
        s += diff * diff;
      }
      d(i, j) = s;
    }
  }
  return d;
}

/// k-fold accuracy of a one-vs-rest RBF kernel ridge classifier
/// (K + λI)α = Y with ±1 targets, predicting the class of largest score.
inline ProbeResult probe_classify(const Matrix& embeddings, std::span<const int> labels,
                                  const ProbeOptions& opt = {}) {
  const std::size_t n = embeddings.rows();
  if (labels.size() != n) throw ShapeError("one label per embedding row required");
  if (opt.n_folds < 2 || n < opt.n_folds)
    throw DegenerateFold("need n >= n_folds >= 2, got n=" + std::to_string(n));

  const std::set<int> classes_set(labels.begin(), labels.end());
  const std::vector<int> classes(classes_set.begin(), classes_set.end());
  if (classes.size() < 2) throw DegenerateFold("probe needs at least two classes");

  double gamma = 0.0;
  if (opt.gamma) {
    gamma = *opt.gamma;
  } else {
    // Mean per-column variance: unchanged by translation and rotation.
    const Matrix centered = center_columns(embeddings);
    double var = 0.0;
    for (double v : centered.values()) var += v * v;
    var /= static_cast<double>(embeddings.size());
    gamma = var > 0.0 ? 1.0 / (static_cast<double>(embeddings.cols()) * var) : 1.0;
  }

  const Matrix dist = squared_distances(embeddings, embeddings);
  const auto folds = stratified_folds(labels, opt.n_folds, opt.seed);

  ProbeResult result;
  result.n_folds = opt.n_folds;
  result.label_name = opt.label_name;
  for (std::size_t f = 0; f < opt.n_folds; ++f) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < n; ++i) (folds[i] == f ? te : tr).push_back(i);
    std::set<int> present;
    for (auto i : tr) present.insert(labels[i]);
    if (present.size() != classes.size())
      throw DegenerateFold("fold " + std::to_string(f) + " training part lacks a class");
    if (te.empty()) throw DegenerateFold("fold " + std::to_string(f) + " is empty");

    EigenRowMatrix k(static_cast<Eigen::Index>(tr.size()), static_cast<Eigen::Index>(tr.size()));
    for (std::size_t i = 0; i < tr.size(); ++i)
      for (std::size_t j = 0; j < tr.size(); ++j)
        k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::exp(-gamma * dist(tr[i], tr[j]));
    k.diagonal().array() += opt.ridge;
    EigenRowMatrix targets(static_cast<Eigen::Index>(tr.size()), static_cast<Eigen::Index>(classes.size()));
    for (std::size_t i = 0; i < tr.size(); ++i)
      for (std::size_t c = 0; c < classes.size(); ++c)
        targets(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = labels[tr[i]] == classes[c] ? 1.0 : -1.0;
    const EigenRowMatrix alpha = k.ldlt().solve(targets);

    std::size_t correct = 0;
    for (auto t : te) {
      Eigen::RowVectorXd kt(static_cast<Eigen::Index>(tr.size()));
      for (std::size_t i = 0; i < tr.size(); ++i)
        kt(static_cast<Eigen::Index>(i)) = std::exp(-gamma * dist(t, tr[i]));
      const Eigen::RowVectorXd scores = kt * alpha;
      Eigen::Index best = 0;
      scores.maxCoeff(&best);
      if (classes[static_cast<std::size_t>(best)] == labels[t]) ++correct;
    }
    result.fold_accuracies.push_back(static_cast<double>(correct) / static_cast<double>(te.size()));
  }
  for (double a : result.fold_accuracies) result.mean += a;
  result.mean /= static_cast<double>(opt.n_folds);
  for (double a : result.fold_accuracies) result.stddev += (a - result.mean) * (a - result.mean);
  result.stddev = std::sqrt(result.stddev / static_cast<double>(opt.n_folds));
  return result;
}

/// Percentage reduction of `model_mse` relative to `baseline_mse`.
inline double recon_improvement(double model_mse, double baseline_mse) {
  if (!(baseline_mse > 0.0)) throw DimensionError("baseline MSE must be positive");
  return 100.0 * (baseline_mse - model_mse) / baseline_mse;
}

/// Per-subject weights as rows: the s rows of a decomposed map, the
/// flattened W_i of a subject map.
inline Matrix subject_weights(const SubjectLayer& layer) {
  if (const auto* d = std::get_if<DecomposedMap>(&layer)) return d->singular;
  if (const auto* s = std::get_if<SubjectMap>(&layer)) {
    if (s->weights.empty()) return {};
    Matrix out(s->weights.size(), s->weights[0].size());
    for (std::size_t i = 0; i < s->weights.size(); ++i)
      std::copy(s->weights[i].values().begin(), s->weights[i].values().end(), out.row(i).begin());
    return out;
  }
  throw ShapeError("group maps have no subject-specific weights");
}

/// Encoder weights, followed by decoder weights when the model has them.
inline Matrix subject_fingerprints(const Model& model) {
  const Matrix enc = subject_weights(model.encoder_map);
  if (!model.decoder_map) return enc;
  const Matrix dec = subject_weights(*model.decoder_map);
  Matrix out(enc.rows(), enc.cols() + dec.cols());
  for (std::size_t r = 0; r < enc.rows(); ++r) {
    std::copy(enc.row(r).begin(), enc.row(r).end(), out.row(r).begin());
    std::copy(dec.row(r).begin(), dec.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(enc.cols()));
  }
  return out;
}

/// First two principal-component scores of the subject-weight matrix.
/// Identical rows give all-zero coordinates.
inline Matrix subject_weight_pca(const Matrix& weights) {
  if (weights.rows() < 3) throw DimensionError("subject_weight_pca needs at least 3 subjects");
  if (weights.cols() < 2) throw DimensionError("subject_weight_pca needs at least 2 columns");
  return pca(weights, 2).scores;
}

struct CircleFit {
  double center_x = 0.0;
  double center_y = 0.0;
  double radius = 0.0;
  double residual_rms = 0.0;  // RMS of (|p − c| − r)

  double relative_residual() const { return residual_rms / radius; }
};

inline nlohmann::json to_json(const CircleFit& c) {
  return {{"center", {c.center_x, c.center_y}},
          {"radius", c.radius},
          {"residual_rms", c.residual_rms},
          {"relative_residual", c.relative_residual()}};
}

/// Algebraic (Kåsa) circle: least squares on x² + y² + Dx + Ey + F = 0.
inline CircleFit circle_fit(const Matrix& coords) {
  if (coords.cols() != 2) throw DimensionError("circle_fit expects M×2 coordinates");
  const std::size_t m = coords.rows();
  if (m < 3) throw DegenerateGeometry("circle_fit needs at least 3 points");

  // Work in centered, scaled coordinates so the collinearity test is scale-free.
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    mx += coords(i, 0);
    my += coords(i, 1);
  }
  mx /= static_cast<double>(m);
  my /= static_cast<double>(m);
  double scale = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    scale = std::max({scale, std::abs(coords(i, 0) - mx), std::abs(coords(i, 1) - my)});
  if (scale == 0.0) throw DegenerateGeometry("all points coincide");

  Eigen::MatrixXd a(static_cast<Eigen::Index>(m), 3);
  Eigen::VectorXd b(static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) {
    const double x = (coords(i, 0) - mx) / scale;
    const double y = (coords(i, 1) - my) / scale;
    const auto r = static_cast<Eigen::Index>(i);
    a(r, 0) = x;
    a(r, 1) = y;
    a(r, 2) = 1.0;
    b(r) = -(x * x + y * y);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv(sv.size() - 1) < 1e-9 * sv(0)) throw DegenerateGeometry("points are collinear");
  // Points on a line still give a full-rank design; they show up as an
  // unbounded radius instead.
  const Eigen::VectorXd sol = svd.solve(b);
  const double cx = -sol(0) / 2.0;
  const double cy = -sol(1) / 2.0;
  const double r2 = cx * cx + cy * cy - sol(2);
  if (!(r2 > 0.0) || std::sqrt(r2) > 1e6) throw DegenerateGeometry("points are collinear");

  CircleFit fit;
  fit.center_x = mx + scale * cx;
  fit.center_y = my + scale * cy;
  fit.radius = scale * std::sqrt(r2);
  double ss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double d = std::hypot(coords(i, 0) - fit.center_x, coords(i, 1) - fit.center_y) - fit.radius;
    ss += d * d;
  }
  fit.residual_rms = std::sqrt(ss / static_cast<double>(m));
  return fit;
}

/// Angle of each point around a center, in (−π, π].
inline std::vector<double> angles_around(const Matrix& coords, double cx, double cy) {
  std::vector<double> out(coords.rows());
  for (std::size_t i = 0; i < coords.rows(); ++i)
    out[i] = std::atan2(coords(i, 1) - cy, coords(i, 0) - cx);
  return out;
}

/// Fisher–Lee circular–circular correlation. Invariant to rotating either
/// sample; a reflection flips the sign.
inline double circular_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("circular_correlation size mismatch");
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double sa = std::sin(a[i] - a[j]);
      const double sb = std::sin(b[i] - b[j]);
      num += sa * sb;
      da += sa * sa;
      db += sb * sb;
    }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

}  // namespace subjmap
