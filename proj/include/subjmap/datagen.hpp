#pragma once

#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <variant>
#include <vector>

#include "subjmap/dataset.hpp"
#include "subjmap/errors.hpp"
#include "subjmap/linalg.hpp"
#include "subjmap/rng.hpp"

namespace subjmap {

struct LabeledSamples {
  Matrix samples;           // n × 2
  std::vector<int> labels;  // 0 or 1
};

/// Two interleaving half circles: class 0 on the upper unit arc, class 1 on
/// the lower unit arc shifted by (1, 0.5). ⌈n/2⌉ points in class 0 and ⌊n/2⌋
/// in class 1, evenly spaced in angle, Gaussian noise of std `noise` per
/// coordinate, rows shuffled.
inline LabeledSamples half_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n < 2) throw DimensionError("half_moons needs n >= 2");
  SeededRng rng(seed);
  const std::size_t n0 = (n + 1) / 2;
  const std::size_t n1 = n / 2;
  auto angle = [](std::size_t i, std::size_t count) {
    return count > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(count - 1) : 0.0;
  };
  LabeledSamples raw{Matrix(n, 2), std::vector<int>(n)};
  for (std::size_t i = 0; i < n0; ++i) {
    raw.samples(i, 0) = std::cos(angle(i, n0));
    raw.samples(i, 1) = std::sin(angle(i, n0));
    raw.labels[i] = 0;
  }
  for (std::size_t i = 0; i < n1; ++i) {
    raw.samples(n0 + i, 0) = 1.0 - std::cos(angle(i, n1));
    raw.samples(n0 + i, 1) = 0.5 - std::sin(angle(i, n1));
    raw.labels[n0 + i] = 1;
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  LabeledSamples out{raw.samples.rows_subset(order), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) out.labels[i] = raw.labels[order[i]];
  if (noise > 0.0)
    for (auto& v : out.samples.values()) v += noise * rng.normal();
  return out;
}

struct RotationGroundTruth {
  std::vector<double> angles;  // radians, one per subject
};

/// The 2-D rotation [[cos θ, sin θ], [−sin θ, cos θ]] acting on column vectors.
inline Matrix rotation_matrix(double theta) {
  return Matrix{{std::cos(theta), std::sin(theta)}, {-std::sin(theta), std::cos(theta)}};
}

/// Subject i's data is samples · R(θ_i)ᵀ, i.e. every sample rotated by R(θ_i).
inline MultiSubjectDataset rotate_with_angles(const LabeledSamples& base,
                                              std::span<const double> angles) {
  if (base.samples.cols() != 2) throw DimensionError("rotation needs 2-D samples");
  MultiSubjectDataset data;
  data.n_features = 2;
  data.metadata.generator = "rotated_half_moons";
  for (std::size_t i = 0; i < angles.size(); ++i) {
    SubjectRecord s;
    s.subject_id = "subject_" + std::to_string(i);
    s.x = matmul_nt(base.samples, rotation_matrix(angles[i]));
    s.labels = base.labels;
    data.subjects.push_back(std::move(s));
  }
  return data;
}

/// M subjects with θ_i ~ U[−2π, 2π].
inline std::pair<MultiSubjectDataset, RotationGroundTruth> rotate_subjects(
    const LabeledSamples& base, std::size_t n_subjects, std::uint64_t seed) {
  SeededRng rng(seed);
  RotationGroundTruth truth;
  for (std::size_t i = 0; i < n_subjects; ++i)
    truth.angles.push_back(rng.uniform(-2.0 * std::numbers::pi, 2.0 * std::numbers::pi));
  MultiSubjectDataset data = rotate_with_angles(base, truth.angles);
  data.metadata.seed = seed;
  return {std::move(data), std::move(truth)};
}

struct HalfMoonsBenchmark {
  std::size_t n_samples = 1000;
  double noise = 0.1;
  std::uint64_t sample_seed = 42;
  std::size_t n_subjects = 100;
  std::uint64_t angle_seed = 0;
  bool center = true;  // subtract the sample mean before rotating
};

/// Half moons → optional centering → per-subject rotation.
inline std::pair<MultiSubjectDataset, RotationGroundTruth> rotated_half_moons(
    const HalfMoonsBenchmark& cfg) {
  LabeledSamples base = half_moons(cfg.n_samples, cfg.noise, cfg.sample_seed);
  if (cfg.center) base.samples = center_columns(base.samples);
  return rotate_subjects(base, cfg.n_subjects, cfg.angle_seed);
}

// ---------------------------------------------------------------------------
// Splits

/// Test gets round(test_fraction·T) timesteps; of the rest, val gets
/// round(val_fraction·rest). Indices are a seeded permutation shared by all
/// subjects.
struct TimestepFractionSplit {
  double test_fraction = 0.8;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
};

/// train = first ⌊T/2⌋ timesteps, test = the rest, val empty.
struct FirstHalfSplit {};

/// The last `count` subjects of a seeded permutation go to test; everything
/// else to train; val empty. Without a seed the last `count` subjects in
/// order are held out.
struct SubjectHoldoutSplit {
  std::size_t count = 0;
  std::optional<std::uint64_t> seed;
};

using SplitScheme = std::variant<TimestepFractionSplit, FirstHalfSplit, SubjectHoldoutSplit>;

struct DatasetSplit {
  MultiSubjectDataset train;
  MultiSubjectDataset val;
  MultiSubjectDataset test;
  // Timestep schemes: indices into every subject's rows.
  // Holdout scheme: indices into the subject list.
  std::vector<std::size_t> train_idx, val_idx, test_idx;
};

namespace detail {

inline MultiSubjectDataset select_timesteps(const MultiSubjectDataset& data,
                                            std::span<const std::size_t> idx) {
  MultiSubjectDataset out;
  out.n_features = data.n_features;
  out.metadata = data.metadata;
  for (const auto& s : data.subjects) {
    SubjectRecord r;
    r.subject_id = s.subject_id;
    r.group = s.group;
    r.x = s.x.rows_subset(idx);
    if (s.labels) {
      std::vector<int> l;
      for (auto i : idx) l.push_back((*s.labels)[i]);
      r.labels = std::move(l);
    }
    out.subjects.push_back(std::move(r));
  }
  return out;
}

inline MultiSubjectDataset select_subjects(const MultiSubjectDataset& data,
                                           std::span<const std::size_t> idx) {
  MultiSubjectDataset out;
  out.n_features = data.n_features;
  out.metadata = data.metadata;
  for (auto i : idx) out.subjects.push_back(data.subjects[i]);
  return out;
}

inline std::size_t common_length(const MultiSubjectDataset& data) {
  if (data.subjects.empty()) throw DimensionError("empty dataset");
  const std::size_t t = data.subjects[0].timesteps();
  for (const auto& s : data.subjects)
    if (s.timesteps() != t)
      throw ShapeMismatch("timestep splits need equal T; subject '" + s.subject_id + "' differs");
  return t;
}

}  // namespace detail

/// Leading ⌈fraction·T⌉ timesteps of every subject.
inline MultiSubjectDataset leading_timesteps(const MultiSubjectDataset& data, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw InvalidFraction("fraction must be in (0, 1], got " + std::to_string(fraction));
  const std::size_t t = detail::common_length(data);
  const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(t) - 1e-9));
  if (count < 1) throw EmptySubset("fraction " + std::to_string(fraction) + " selects no timesteps");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  return detail::select_timesteps(data, idx);
}

inline DatasetSplit split(const MultiSubjectDataset& data, const SplitScheme& scheme) {
  DatasetSplit out;
  if (const auto* tf = std::get_if<TimestepFractionSplit>(&scheme)) {
    if (!(tf->test_fraction >= 0.0 && tf->test_fraction < 1.0) ||
        !(tf->val_fraction >= 0.0 && tf->val_fraction < 1.0))
      throw InvalidFraction("split fractions must lie in [0, 1)");
    const std::size_t t = detail::common_length(data);
    std::vector<std::size_t> order(t);
    for (std::size_t i = 0; i < t; ++i) order[i] = i;
    SeededRng rng(tf->seed);
    rng.shuffle(order);
    const auto n_test = static_cast<std::size_t>(std::llround(tf->test_fraction * static_cast<double>(t)));
    const std::size_t rest = t - n_test;
    const auto n_val = static_cast<std::size_t>(std::llround(tf->val_fraction * static_cast<double>(rest)));
    out.test_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    out.val_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
                       order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    out.train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), order.end());
    for (auto* v : {&out.train_idx, &out.val_idx, &out.test_idx}) std::sort(v->begin(), v->end());
    out.train = detail::select_timesteps(data, out.train_idx);
    out.val = detail::select_timesteps(data, out.val_idx);
    out.test = detail::select_timesteps(data, out.test_idx);
  } else if (std::holds_alternative<FirstHalfSplit>(scheme)) {
    const std::size_t t = detail::common_length(data);
    for (std::size_t i = 0; i < t; ++i) (i < t / 2 ? out.train_idx : out.test_idx).push_back(i);
    out.train = detail::select_timesteps(data, out.train_idx);
    out.val = detail::select_timesteps(data, out.val_idx);
    out.test = detail::select_timesteps(data, out.test_idx);
  } else {
    const auto& ho = std::get<SubjectHoldoutSplit>(scheme);
    const std::size_t m = data.size();
    if (ho.count > m) throw InvalidFraction("cannot hold out " + std::to_string(ho.count) +
                                            " of " + std::to_string(m) + " subjects");
    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = i;
    if (ho.seed) {
      SeededRng rng(*ho.seed);
      rng.shuffle(order);
    }
    out.train_idx.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(ho.count));
    out.test_idx.assign(order.end() - static_cast<std::ptrdiff_t>(ho.count), order.end());
    std::sort(out.train_idx.begin(), out.train_idx.end());
    std::sort(out.test_idx.begin(), out.test_idx.end());
    out.train = detail::select_subjects(data, out.train_idx);
    out.val = detail::select_subjects(data, out.val_idx);
    out.test = detail::select_subjects(data, out.test_idx);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-subject generator with a planted group effect

struct GroupDatasetParams {
  std::size_t n_subjects = 80;       // M, even
  std::size_t timesteps = 100;       // T
  std::size_t n_features = 40;       // N
  std::size_t latent_size = 2;       // d
  std::size_t hidden_size = 8;       // L
  double group_effect = 2.0;         // distance between group means of s along the planted axis
  double subject_spread = 0.5;       // std of s around the common mean
  double noise = 0.1;                // std of additive Gaussian noise on X
  double smoothness = 0.9;           // AR(1) coefficient of the latent trajectories
  std::size_t group_axis = 0;        // coordinate of s carrying the group effect
  std::uint64_t seed = 0;
};

struct GroupGroundTruth {
  Matrix latents;         // Z, T × d, shared by all subjects
  Matrix hidden;          // H = tanh(Z·A + c), T × L
  Matrix mixing;          // A, d × L
  Matrix hidden_bias;     // c, 1 × L
  Matrix hidden_basis;    // U, L × L orthonormal
  Matrix voxel_basis;     // V, N × L
  Matrix singular;        // s, M × L
  std::vector<int> groups;
  Matrix group_direction;    // 1 × L unit vector in s-space
  Matrix spatial_direction;  // 1 × N, the voxel pattern the group axis drives (column of V)
};

struct GroupDataset {
  MultiSubjectDataset data;
  GroupGroundTruth truth;
};

/// Noise-free signal of subject i: ((H·U) ⊙ s_i) · Vᵀ.
inline Matrix planted_signal(const GroupGroundTruth& truth, std::size_t subject) {
  Matrix hu = matmul(truth.hidden, truth.hidden_basis);
  for (std::size_t t = 0; t < hu.rows(); ++t)
    for (std::size_t j = 0; j < hu.cols(); ++j) hu(t, j) *= truth.singular(subject, j);
  return matmul_nt(hu, truth.voxel_basis);
}

/// Subjects alternate between group 0 and group 1. Each subject's s row is
/// 1 + spread·ξ ± (group_effect/2)·e_axis; every subject shares the latent
/// trajectory Z and the bases U, V. Timestep labels mark the sign of the
/// first latent coordinate.
inline GroupDataset synth_group_dataset(const GroupDatasetParams& p) {
  if (p.latent_size > p.n_features) throw DimensionError("latent_size must not exceed n_features");
  if (p.n_subjects == 0 || p.n_subjects % 2 != 0)
    throw DimensionError("n_subjects must be positive and even");
  if (p.group_axis >= p.hidden_size) throw DimensionError("group_axis outside hidden size");
  if (p.hidden_size > p.n_features) throw DimensionError("hidden_size must not exceed n_features");
  SeededRng rng(p.seed);
  GroupDataset out;
  auto& truth = out.truth;

  truth.latents = Matrix(p.timesteps, p.latent_size);
  const double innovation = std::sqrt(1.0 - p.smoothness * p.smoothness);
  for (std::size_t j = 0; j < p.latent_size; ++j) truth.latents(0, j) = rng.normal();
  for (std::size_t t = 1; t < p.timesteps; ++t)
    for (std::size_t j = 0; j < p.latent_size; ++j)
      truth.latents(t, j) = p.smoothness * truth.latents(t - 1, j) + innovation * rng.normal();

  truth.mixing = Matrix::gaussian(p.latent_size, p.hidden_size, rng,
                                  1.0 / std::sqrt(static_cast<double>(p.latent_size)));
  truth.hidden_bias = Matrix::gaussian(1, p.hidden_size, rng, 0.1);
  truth.hidden = matmul(truth.latents, truth.mixing);
  add_row_vector(truth.hidden, truth.hidden_bias);
  for (auto& v : truth.hidden.values()) v = std::tanh(v);

  truth.hidden_basis = qr_orthonormalize(Matrix::gaussian(p.hidden_size, p.hidden_size, rng));
  // Sparse spatial maps with disjoint supports: each voxel loads on one
  // hidden unit. Columns are orthogonal and strongly non-Gaussian.
  truth.voxel_basis = Matrix(p.n_features, p.hidden_size);
  {
    std::vector<std::size_t> voxels(p.n_features);
    std::iota(voxels.begin(), voxels.end(), std::size_t{0});
    rng.shuffle(voxels);
    for (std::size_t k = 0; k < p.n_features; ++k)
      truth.voxel_basis(voxels[k], k % p.hidden_size) = rng.normal();
  }

  truth.group_direction = Matrix(1, p.hidden_size);
  truth.group_direction(0, p.group_axis) = 1.0;
  truth.spatial_direction = truth.voxel_basis.col(p.group_axis).transpose();

  truth.singular = Matrix(p.n_subjects, p.hidden_size);
  for (std::size_t i = 0; i < p.n_subjects; ++i) {
    const int g = static_cast<int>(i % 2);
    truth.groups.push_back(g);
    const double shift = (g == 1 ? 0.5 : -0.5) * p.group_effect;
    for (std::size_t j = 0; j < p.hidden_size; ++j)
      truth.singular(i, j) = 1.0 + p.subject_spread * rng.normal() + shift * truth.group_direction(0, j);
  }

  std::vector<int> labels(p.timesteps);
  for (std::size_t t = 0; t < p.timesteps; ++t) labels[t] = truth.latents(t, 0) > 0.0 ? 1 : 0;

  auto& data = out.data;
  data.n_features = p.n_features;
  data.metadata.generator = "synth_group_dataset";
  data.metadata.seed = p.seed;
  for (std::size_t i = 0; i < p.n_subjects; ++i) {
    SubjectRecord s;
    s.subject_id = "subject_" + std::to_string(i);
    s.group = truth.groups[i];
    s.labels = labels;
    s.x = planted_signal(truth, i);
    if (p.noise > 0.0)
      for (auto& v : s.x.values()) v += p.noise * rng.normal();
    data.subjects.push_back(std::move(s));
  }
  return out;
}

}  // namespace subjmap
