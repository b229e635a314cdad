#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "subjmap/datagen.hpp"

using namespace subjmap;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("subjmap_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double wrap(double a) { return std::remainder(a, 2.0 * std::numbers::pi); }

// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
double ks_pvalue(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  const double ne = static_cast<double>(a.size() * b.size()) / static_cast<double>(a.size() + b.size());
  const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  double q = 0.0;
  for (int k = 1; k <= 100; ++k) q += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(q, 0.0, 1.0);
}

MultiSubjectDataset constant_dataset(std::size_t subjects, std::size_t t) {
  MultiSubjectDataset d;
  d.n_features = 1;
  for (std::size_t s = 0; s < subjects; ++s) {
    SubjectRecord r;
    r.subject_id = "s" + std::to_string(s);
    r.x = Matrix(t, 1);
    for (std::size_t i = 0; i < t; ++i) r.x(i, 0) = static_cast<double>(i);
    d.subjects.push_back(r);
  }
  return d;
}

void expect_partition(const DatasetSplit& s, std::size_t total) {
  std::vector<std::size_t> all;
  for (const auto* v : {&s.train_idx, &s.val_idx, &s.test_idx}) all.insert(all.end(), v->begin(), v->end());
  std::sort(all.begin(), all.end());
  ASSERT_EQ(all.size(), total);
  for (std::size_t i = 0; i < total; ++i) EXPECT_EQ(all[i], i);
}

}  // namespace

TEST(HalfMoons, NoiselessGeometry) {
  const LabeledSamples m = half_moons(4, 0.0, 0);
  for (std::size_t i = 0; i < 4; ++i) {
    const double x = m.samples(i, 0), y = m.samples(i, 1);
    if (m.labels[i] == 0) {
      EXPECT_NEAR(x * x + y * y, 1.0, 1e-15);
      EXPECT_GE(y, -1e-15);
    } else {
      EXPECT_NEAR((x - 1.0) * (x - 1.0) + (y - 0.5) * (y - 0.5), 1.0, 1e-15);
      EXPECT_LE(y, 0.5 + 1e-15);
    }
  }
}

TEST(HalfMoons, PaperConfigCountsAndDeterminism) {
  const LabeledSamples a = half_moons(1000, 0.1, 42);
  EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), 0), 500);
  EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), 1), 500);
  const LabeledSamples b = half_moons(1000, 0.1, 42);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.labels, b.labels);
  const LabeledSamples odd = half_moons(7, 0.1, 1);
  EXPECT_EQ(std::count(odd.labels.begin(), odd.labels.end(), 0), 4);
  EXPECT_THROW(half_moons(1, 0.0, 0), DimensionError);
}

TEST(Rotation, PaperMatrix) {
  const Matrix r = rotation_matrix(0.3);
  EXPECT_EQ(r(0, 0), std::cos(0.3));
  EXPECT_EQ(r(0, 1), std::sin(0.3));
  EXPECT_EQ(r(1, 0), -std::sin(0.3));
  EXPECT_EQ(r(1, 1), std::cos(0.3));
}

TEST(Rotation, ZeroAndPi) {
  const LabeledSamples base = half_moons(20, 0.1, 3);
  const std::vector<double> angles{0.0, std::numbers::pi};
  const MultiSubjectDataset d = rotate_with_angles(base, angles);
  EXPECT_EQ(d.subjects[0].x, base.samples);
  EXPECT_LT(max_abs_diff(d.subjects[1].x, base.samples * -1.0), 1e-15);
  EXPECT_EQ(*d.subjects[1].labels, base.labels);
}

TEST(Rotation, PaperScaleAndAngleRange) {
  const auto [data, truth] = rotated_half_moons({});
  EXPECT_EQ(data.size(), 100u);
  for (const auto& s : data.subjects) EXPECT_EQ(s.timesteps(), 1000u);
  for (double a : truth.angles) {
    EXPECT_GE(a, -2.0 * std::numbers::pi);
    EXPECT_LE(a, 2.0 * std::numbers::pi);
  }
  // Centered by default; the literal construction keeps the raw offset.
  const Matrix mean = column_means(data.subjects[0].x);
  EXPECT_LT(mean.max_abs(), 1e-12);
  const auto raw = rotated_half_moons({.n_subjects = 2, .center = false});
  EXPECT_GT(column_means(raw.first.subjects[0].x).max_abs(), 0.1);
}

TEST(Rotation, PreservesDistances) {
  const auto [data, truth] = rotated_half_moons({.n_samples = 60, .n_subjects = 5, .angle_seed = 2});
  const Matrix ref = center_columns(half_moons(60, 0.1, 42).samples);
  for (const auto& s : data.subjects)
    for (std::size_t i = 0; i < 60; ++i)
      for (std::size_t j = 0; j < 60; ++j) {
        const double d0 = std::hypot(ref(i, 0) - ref(j, 0), ref(i, 1) - ref(j, 1));
        const double d1 = std::hypot(s.x(i, 0) - s.x(j, 0), s.x(i, 1) - s.x(j, 1));
        EXPECT_NEAR(d0, d1, 1e-10);
      }
}

TEST(Rotation, ProcrustesRecoversRelativeAngle) {
  const auto [data, truth] = rotated_half_moons({.n_samples = 200, .noise = 0.0, .n_subjects = 8, .angle_seed = 5});
  const Matrix& x0 = data.subjects[0].x;
  for (std::size_t s = 1; s < data.size(); ++s) {
    const Matrix& xs = data.subjects[s].x;
    // Closed-form 2-D Procrustes: counter-clockwise angle taking x0 to xs.
    double cross = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < x0.rows(); ++i) {
      cross += x0(i, 0) * xs(i, 1) - x0(i, 1) * xs(i, 0);
      dot += x0(i, 0) * xs(i, 0) + x0(i, 1) * xs(i, 1);
    }
    const double ccw = std::atan2(cross, dot);
    // The paper's matrix acting on row vectors turns clockwise by θ.
    EXPECT_LT(std::abs(wrap(-ccw - (truth.angles[s] - truth.angles[0]))), 1e-8);
  }
}

TEST(Split, HalfMoonsFractions) {
  const auto [data, truth] = rotated_half_moons({.n_subjects = 3});
  const DatasetSplit s = split(data, TimestepFractionSplit{0.8, 0.1, 0});
  EXPECT_EQ(s.train.subjects[0].timesteps(), 180u);
  EXPECT_EQ(s.val.subjects[0].timesteps(), 20u);
  EXPECT_EQ(s.test.subjects[0].timesteps(), 800u);
  expect_partition(s, 1000);
  // Same indices for every subject.
  for (std::size_t k = 0; k < 3; ++k)
    EXPECT_EQ(s.test.subjects[k].x, data.subjects[k].x.rows_subset(s.test_idx));
}

TEST(Split, FirstHalf) {
  const DatasetSplit s = split(constant_dataset(2, 1976), FirstHalfSplit{});
  EXPECT_EQ(s.train.subjects[1].timesteps(), 988u);
  EXPECT_EQ(s.test.subjects[1].timesteps(), 988u);
  EXPECT_EQ(s.test.subjects[0].x(0, 0), 988.0);
  expect_partition(s, 1976);
}

TEST(Split, SubjectHoldout) {
  const DatasetSplit s = split(constant_dataset(368, 2), SubjectHoldoutSplit{74, 7});
  EXPECT_EQ(s.train.size(), 294u);
  EXPECT_EQ(s.test.size(), 74u);
  expect_partition(s, 368);
  const DatasetSplit plain = split(constant_dataset(5, 2), SubjectHoldoutSplit{2, std::nullopt});
  EXPECT_EQ(plain.test.subjects[0].subject_id, "s3");
}

TEST(Split, InvalidFractions) {
  const auto d = constant_dataset(2, 10);
  EXPECT_THROW(split(d, TimestepFractionSplit{1.0, 0.1, 0}), InvalidFraction);
  EXPECT_THROW(split(d, TimestepFractionSplit{0.5, -0.1, 0}), InvalidFraction);
  EXPECT_THROW(split(d, SubjectHoldoutSplit{3, std::nullopt}), InvalidFraction);
  EXPECT_THROW(leading_timesteps(d, 0.0), InvalidFraction);
  EXPECT_EQ(leading_timesteps(d, 0.25).subjects[0].timesteps(), 3u);
}

TEST(SynthGroup, NullEffectGroupsIdenticalInLaw) {
  const GroupDataset g = synth_group_dataset({.n_subjects = 200, .group_effect = 0.0, .seed = 1});
  SeededRng rng(2);
  Matrix dirs = Matrix::gaussian(3, 8, rng);
  for (std::size_t j = 0; j < 8; ++j) dirs(0, j) = g.truth.group_direction(0, j);
  for (std::size_t d = 0; d < 3; ++d) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < 200; ++i) {
      double proj = 0.0;
      for (std::size_t j = 0; j < 8; ++j) proj += g.truth.singular(i, j) * dirs(d, j);
      (g.truth.groups[i] ? b : a).push_back(proj);
    }
    EXPECT_GT(ks_pvalue(a, b), 0.01);
  }
}

TEST(SynthGroup, NoiselessDataMatchesGenerator) {
  const GroupDataset g = synth_group_dataset({.n_subjects = 4, .timesteps = 20, .noise = 0.0, .seed = 3});
  const auto& t = g.truth;
  for (std::size_t i = 0; i < 4; ++i) {
    // Oracle: ((H·U) ⊙ s_i) · Vᵀ by explicit loops.
    Matrix x(20, 40);
    for (std::size_t r = 0; r < 20; ++r)
      for (std::size_t n = 0; n < 40; ++n)
        for (std::size_t l = 0; l < 8; ++l) {
          double hu = 0.0;
          for (std::size_t k = 0; k < 8; ++k) hu += t.hidden(r, k) * t.hidden_basis(k, l);
          x(r, n) += hu * t.singular(i, l) * t.voxel_basis(n, l);
        }
    EXPECT_LT(max_abs_diff(x, g.data.subjects[i].x), 1e-12);
  }
}

TEST(SynthGroup, LinearProbeOnTrueWeights) {
  const GroupDataset g = synth_group_dataset({.n_subjects = 80, .group_effect = 2.0, .seed = 4});
  // Leave-one-out least-squares linear classifier on s (ridge 1e-6).
  const std::size_t m = 80, l = 8;
  std::size_t correct = 0;
  for (std::size_t hold = 0; hold < m; ++hold) {
    EigenRowMatrix a(static_cast<Eigen::Index>(m - 1), static_cast<Eigen::Index>(l + 1));
    Eigen::VectorXd y(static_cast<Eigen::Index>(m - 1));
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < m; ++i) {
      if (i == hold) continue;
      for (std::size_t j = 0; j < l; ++j) a(r, static_cast<Eigen::Index>(j)) = g.truth.singular(i, j);
      a(r, static_cast<Eigen::Index>(l)) = 1.0;
      y(r++) = g.truth.groups[i] ? 1.0 : -1.0;
    }
    const Eigen::MatrixXd ata = a.transpose() * a + 1e-6 * Eigen::MatrixXd::Identity(l + 1, l + 1);
    const Eigen::VectorXd w = ata.ldlt().solve(a.transpose() * y);
    double score = w(static_cast<Eigen::Index>(l));
    for (std::size_t j = 0; j < l; ++j) score += w(static_cast<Eigen::Index>(j)) * g.truth.singular(hold, j);
    correct += (score > 0) == (g.truth.groups[hold] == 1);
  }
  EXPECT_GE(static_cast<double>(correct) / m, 0.9);
}

TEST(SynthGroup, DeterministicAndValidated) {
  const GroupDatasetParams p{.n_subjects = 6, .timesteps = 30, .seed = 8};
  const GroupDataset a = synth_group_dataset(p), b = synth_group_dataset(p);
  EXPECT_TRUE(a.data.same_content(b.data));
  EXPECT_EQ(a.truth.singular, b.truth.singular);
  EXPECT_EQ(a.data.subjects[1].group, 1);
  EXPECT_THROW(synth_group_dataset({.n_subjects = 5}), DimensionError);
  EXPECT_THROW(synth_group_dataset({.n_features = 1, .latent_size = 2}), DimensionError);
  EXPECT_THROW(synth_group_dataset({.n_features = 6}), DimensionError);
}

TEST(DatasetIo, BinaryRoundTrip) {
  const fs::path dir = scratch_dir("binary");
  GroupDataset g = synth_group_dataset({.n_subjects = 4, .timesteps = 9, .n_features = 10, .hidden_size = 4});
  g.data.subjects[2].labels.reset();
  g.data.subjects[3].group.reset();
  save_dataset(g.data, dir / "d.smds");
  const MultiSubjectDataset back = load_dataset(dir / "d.smds");
  EXPECT_TRUE(back.same_content(g.data));
  const auto bytes = detail::read_file_bytes(dir / "d.smds");
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SMDS");
}

TEST(DatasetIo, ManifestRoundTrip) {
  const fs::path dir = scratch_dir("manifest");
  const GroupDataset g = synth_group_dataset({.n_subjects = 2, .timesteps = 5, .n_features = 10, .hidden_size = 4});
  save_dataset(g.data, dir / "manifest.json");
  const MultiSubjectDataset back = load_dataset(dir / "manifest.json");
  EXPECT_TRUE(back.same_content(g.data));
}

TEST(DatasetIo, ManifestWrongWidthNamesSubject) {
  const fs::path dir = scratch_dir("wrong_n");
  {
    std::ofstream(dir / "a.csv") << "1,2,3\n4,5,6\n";
    std::ofstream(dir / "m.json") << R"({"n_features": 2, "subjects": [{"subject_id": "sub-07", "csv_path": "a.csv"}]})";
  }
  try {
    load_dataset(dir / "m.json");
    FAIL() << "expected ShapeMismatch";
  } catch (const ShapeMismatch& e) {
    EXPECT_NE(std::string(e.what()).find("sub-07"), std::string::npos);
  }
  std::ofstream(dir / "m2.json") << R"({"n_features": 3, "subjects": [{"subject_id": "x"}]})";
  EXPECT_THROW(load_dataset(dir / "m2.json"), MissingManifestField);
}

TEST(DatasetIo, TruncatedBinaryReportsOffset) {
  const GroupDataset g = synth_group_dataset({.n_subjects = 2, .timesteps = 5, .n_features = 10, .hidden_size = 4});
  auto bytes = encode_dataset(g.data);
  bytes.resize(bytes.size() - 13);
  try {
    decode_dataset(bytes);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
  auto extra = encode_dataset(g.data);
  extra.push_back(0);
  EXPECT_THROW(decode_dataset(extra), ParseError);
}
