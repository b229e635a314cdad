#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "subjmap/datagen.hpp"
#include "subjmap/eval.hpp"

using namespace subjmap;

namespace {

struct Labeled {
  Matrix x;
  std::vector<int> y;
};

Labeled blobs(std::size_t per_class, std::uint64_t seed) {
  SeededRng rng(seed);
  Labeled out{Matrix(2 * per_class, 3), {}};
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const int c = static_cast<int>(i % 2);
    for (std::size_t j = 0; j < 3; ++j) out.x(i, j) = (c ? 10.0 : -10.0) + 0.3 * rng.normal();
    out.y.push_back(c);
  }
  return out;
}

Matrix circle_points(std::size_t m, double cx, double cy, double r, double radial_noise, std::uint64_t seed) {
  SeededRng rng(seed);
  Matrix p(m, 2);
  for (std::size_t i = 0; i < m; ++i) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(m) + 0.1;
    const double rr = r + radial_noise * rng.normal();
    p(i, 0) = cx + rr * std::cos(a);
    p(i, 1) = cy + rr * std::sin(a);
  }
  return p;
}

}  // namespace

TEST(Probe, SeparatedBlobsArePerfect) {
  const auto b = blobs(50, 1);
  const ProbeResult r = probe_classify(b.x, b.y);
  EXPECT_EQ(r.mean, 1.0);
  EXPECT_EQ(r.fold_accuracies.size(), 5u);
  EXPECT_EQ(r.stddev, 0.0);
}

TEST(Probe, ShuffledLabelsAreAtChance) {
  SeededRng rng(1);
  const Matrix x = Matrix::gaussian(500, 2, rng);
  std::vector<int> y(500);
  for (std::size_t i = 0; i < 500; ++i) y[i] = static_cast<int>(i % 2);
  rng.shuffle(y);
  const ProbeResult r = probe_classify(x, y, {.seed = 1});
  EXPECT_GE(r.mean, 0.4);
  EXPECT_LE(r.mean, 0.6);
}

TEST(Probe, InvariantToTranslationAndRotation) {
  SeededRng rng(2);
  Matrix x = Matrix::gaussian(120, 3, rng);
  std::vector<int> y(120);
  for (std::size_t i = 0; i < 120; ++i) {
    y[i] = x(i, 0) * x(i, 1) > 0 ? 1 : 0;
    x(i, 2) += 0.5 * rng.normal();
  }
  const ProbeResult base = probe_classify(x, y);
  const Matrix q = qr_orthonormalize(Matrix::gaussian(3, 3, rng));
  Matrix moved = matmul(x, q);
  for (std::size_t i = 0; i < moved.rows(); ++i) {
    moved(i, 0) += 7.0;
    moved(i, 1) -= 3.0;
    moved(i, 2) += 100.0;
  }
  const ProbeResult other = probe_classify(moved, y);
  for (std::size_t f = 0; f < 5; ++f) EXPECT_NEAR(base.fold_accuracies[f], other.fold_accuracies[f], 1e-12);
}

TEST(Probe, MulticlassAndFixedGamma) {
  SeededRng rng(3);
  Matrix x(90, 2);
  std::vector<int> y(90);
  for (std::size_t i = 0; i < 90; ++i) {
    y[i] = static_cast<int>(i % 3) * 5;
    x(i, 0) = 4.0 * std::cos(2.0 * y[i]) + 0.2 * rng.normal();
    x(i, 1) = 4.0 * std::sin(2.0 * y[i]) + 0.2 * rng.normal();
  }
  EXPECT_EQ(probe_classify(x, y, {.n_folds = 3, .gamma = 0.5}).mean, 1.0);
}

TEST(Probe, StratifiedFoldsBalanceClasses) {
  std::vector<int> y(100);
  for (std::size_t i = 0; i < 100; ++i) y[i] = i < 30 ? 1 : 0;
  const auto folds = stratified_folds(y, 5, 4);
  std::vector<int> ones(5), all(5);
  for (std::size_t i = 0; i < 100; ++i) {
    all[folds[i]]++;
    ones[folds[i]] += y[i];
  }
  for (std::size_t f = 0; f < 5; ++f) {
    EXPECT_EQ(all[f], 20);
    EXPECT_EQ(ones[f], 6);
  }
}

TEST(Probe, DegenerateInputs) {
  const auto b = blobs(2, 5);
  EXPECT_THROW(probe_classify(b.x, b.y, {.n_folds = 5}), DegenerateFold);
  const std::vector<int> one(b.y.size(), 0);
  EXPECT_THROW(probe_classify(b.x, one, {.n_folds = 2}), DegenerateFold);
  // Only one sample of class 1: a training fold must lack it.
  Matrix x(6, 1);
  const std::vector<int> rare{0, 0, 0, 0, 0, 1};
  EXPECT_THROW(probe_classify(x, rare, {.n_folds = 2}), DegenerateFold);
}

TEST(ReconImprovement, Arithmetic) {
  EXPECT_EQ(recon_improvement(0.7, 0.7), 0.0);
  EXPECT_EQ(recon_improvement(0.5, 1.0), 50.0);
  EXPECT_LT(recon_improvement(2.0, 1.0), 0.0);
  EXPECT_THROW(recon_improvement(0.5, 0.0), DimensionError);
}

TEST(SubjectWeightPca, RankTwoRowsReconstruct) {
  SeededRng rng(6);
  const Matrix basis = Matrix::gaussian(2, 10, rng);
  const Matrix coef = Matrix::gaussian(30, 2, rng);
  Matrix s = matmul(coef, basis);
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.cols(); ++j) s(i, j) += 1.0 + 0.1 * static_cast<double>(j);
  const Matrix coords = subject_weight_pca(s);
  const PcaResult p = pca(s, 2);
  Matrix recon = matmul_nt(coords, p.components);
  for (std::size_t i = 0; i < recon.rows(); ++i)
    for (std::size_t j = 0; j < recon.cols(); ++j) recon(i, j) += p.mean(0, j);
  EXPECT_LT(frobenius_norm(recon - s) / frobenius_norm(s), 1e-8);
}

TEST(SubjectWeightPca, IdenticalRowsGiveZeros) {
  Matrix s(5, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) s(i, j) = 1.0 + static_cast<double>(j);
  EXPECT_EQ(subject_weight_pca(s).max_abs(), 0.0);
}

TEST(SubjectWeightPca, ConstantColumnsDoNotMatter) {
  SeededRng rng(7);
  const Matrix s = Matrix::gaussian(12, 4, rng);
  Matrix wide(12, 6);
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j < 4; ++j) wide(i, j) = s(i, j);
    wide(i, 4) = 3.0;
    wide(i, 5) = -1.0;
  }
  const Matrix a = subject_weight_pca(s);
  const Matrix b = subject_weight_pca(wide);
  for (std::size_t k = 0; k < 2; ++k) {
    double same = 0.0, flipped = 0.0;
    for (std::size_t i = 0; i < 12; ++i) {
      same = std::max(same, std::abs(a(i, k) - b(i, k)));
      flipped = std::max(flipped, std::abs(a(i, k) + b(i, k)));
    }
    EXPECT_LT(std::min(same, flipped), 1e-10);
  }
}

TEST(SubjectWeightPca, Errors) {
  EXPECT_THROW(subject_weight_pca(Matrix(2, 4)), DimensionError);
  EXPECT_THROW(subject_weight_pca(Matrix(5, 1)), DimensionError);
}

TEST(SubjectWeights, PerVariant) {
  SeededRng rng(8);
  const SubjectLayer d = make_subject_layer(LayerVariant::Decomposed, MapSide::Encoder, 5, 3, 4, rng);
  EXPECT_EQ(subject_weights(d), std::get<DecomposedMap>(d).singular);
  const SubjectLayer s = make_subject_layer(LayerVariant::Subject, MapSide::Encoder, 5, 3, 4, rng);
  EXPECT_EQ(subject_weights(s).rows(), 4u);
  EXPECT_EQ(subject_weights(s).cols(), 15u);
  const SubjectLayer g = make_subject_layer(LayerVariant::Group, MapSide::Encoder, 5, 3, 4, rng);
  EXPECT_THROW(subject_weights(g), ShapeError);
}

TEST(CircleFit, ExactCircle) {
  const CircleFit c = circle_fit(circle_points(40, 0.0, 0.0, 1.0, 0.0, 0));
  EXPECT_LT(c.relative_residual(), 1e-10);
  EXPECT_NEAR(c.radius, 1.0, 1e-12);
  const CircleFit off = circle_fit(circle_points(7, 3.0, -2.0, 0.25, 0.0, 0));
  EXPECT_NEAR(off.center_x, 3.0, 1e-12);
  EXPECT_NEAR(off.center_y, -2.0, 1e-12);
  EXPECT_NEAR(off.radius, 0.25, 1e-12);
}

TEST(CircleFit, RadialNoiseMonteCarlo) {
  // Oracle: with radial noise σ = 0.01·r the RMS radial residual is ≈ σ.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const CircleFit c = circle_fit(circle_points(100, 1.0, 2.0, 5.0, 0.05, seed));
    EXPECT_GE(c.relative_residual(), 0.005);
    EXPECT_LE(c.relative_residual(), 0.02);
  }
}

TEST(CircleFit, ScalesExactly) {
  const Matrix p = circle_points(30, 0.5, -1.0, 2.0, 0.1, 9);
  const CircleFit a = circle_fit(p);
  const CircleFit b = circle_fit(p * 3.0);
  EXPECT_NEAR(b.center_x, 3.0 * a.center_x, 1e-10);
  EXPECT_NEAR(b.center_y, 3.0 * a.center_y, 1e-10);
  EXPECT_NEAR(b.radius, 3.0 * a.radius, 1e-10);
  EXPECT_NEAR(b.relative_residual(), a.relative_residual(), 1e-10);
}

TEST(CircleFit, DegenerateGeometry) {
  Matrix line(5, 2);
  for (std::size_t i = 0; i < 5; ++i) {
    line(i, 0) = static_cast<double>(i);
    line(i, 1) = 2.0 * static_cast<double>(i) + 1.0;
  }
  EXPECT_THROW(circle_fit(line), DegenerateGeometry);
  EXPECT_THROW(circle_fit(Matrix(4, 2)), DegenerateGeometry);
  EXPECT_THROW(circle_fit(Matrix(2, 2)), DegenerateGeometry);
}

TEST(CircularCorrelation, RotationAndReflection) {
  SeededRng rng(10);
  std::vector<double> a(50), rotated(50), reflected(50), noise(50);
  for (std::size_t i = 0; i < 50; ++i) {
    a[i] = rng.uniform(-std::numbers::pi, std::numbers::pi);
    rotated[i] = a[i] + 1.3;
    reflected[i] = -a[i];
    noise[i] = rng.uniform(-std::numbers::pi, std::numbers::pi);
  }
  EXPECT_NEAR(circular_correlation(a, rotated), 1.0, 1e-12);
  EXPECT_NEAR(circular_correlation(a, reflected), -1.0, 1e-12);
  EXPECT_LT(std::abs(circular_correlation(a, noise)), 0.3);
}

TEST(CircleFit, RotatedSubjectsRecoverAngles) {
  // Points at the true angles on a circle: the fitted angles correlate fully.
  const auto [data, truth] = rotated_half_moons({.n_samples = 10, .noise = 0.0, .n_subjects = 12, .angle_seed = 3});
  Matrix coords(12, 2);
  for (std::size_t i = 0; i < 12; ++i) {
    coords(i, 0) = std::cos(truth.angles[i]);
    coords(i, 1) = std::sin(truth.angles[i]);
  }
  const CircleFit c = circle_fit(coords);
  const auto angles = angles_around(coords, c.center_x, c.center_y);
  EXPECT_NEAR(std::abs(circular_correlation(angles, truth.angles)), 1.0, 1e-10);
  EXPECT_EQ(data.size(), 12u);
}
