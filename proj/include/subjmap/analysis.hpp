#pragma once

// Group-difference pipeline: subject-specific latent traversals, spatial
// FastICA on the stacked reconstructions, one Welch t-test per source on the
// subject-averaged mixing weights, then BH-FDR across sources.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subjmap/dataset.hpp"
#include "subjmap/errors.hpp"
#include "subjmap/ica.hpp"
#include "subjmap/linalg.hpp"
#include "subjmap/models.hpp"
#include "subjmap/stats.hpp"

namespace subjmap {

struct TraversalGrid {
  double lo = -3.0;
  double hi = 3.0;
  std::size_t points = 11;

  std::vector<double> values() const {
    if (points < 1) throw DimensionError("traversal grid needs at least one point");
    std::vector<double> v(points);
    for (std::size_t g = 0; g < points; ++g)
      v[g] = points == 1 ? lo : lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(points - 1);
    return v;
  }
  bool operator==(const TraversalGrid&) const = default;
};

struct PipelineOptions {
  TraversalGrid grid;
  IcaOptions ica;
  double q = 0.05;
};

struct SourceTest {
  std::size_t source_id = 0;
  double t = 0.0;
  double p = 1.0;
  double p_adj = 1.0;
  bool reject = false;
  bool degenerate = false;
  double group_mean_a = 0.0;
  double group_mean_b = 0.0;
  bool operator==(const SourceTest&) const = default;
};

struct GroupDiffReport {
  std::vector<SourceTest> sources;
  int group_a = 0;
  int group_b = 1;
  double q = 0.05;
  TraversalGrid grid;
  Matrix subject_weights;  // M×k subject-averaged mixing rows

  std::size_t rejections() const {
    return static_cast<std::size_t>(std::count_if(sources.begin(), sources.end(),
                                                  [](const SourceTest& s) { return s.reject; }));
  }
  bool operator==(const GroupDiffReport&) const = default;
};

struct GroupDiffResult {
  GroupDiffReport report;
  ICAResult ica;
};

/// Rows: subject-major, then latent dim, then grid point.
inline Matrix traversal_stack(const Model& model, std::size_t n_subjects, std::span<const double> grid) {
  const std::size_t d = model.spec.latent_size;
  const std::size_t n = model.spec.input_size;
  Matrix stacked(n_subjects * d * grid.size(), n);
  std::size_t row = 0;
  std::vector<SubjectIndex> ids(n_subjects);
  for (std::size_t i = 0; i < n_subjects; ++i) ids[i] = static_cast<SubjectIndex>(i);
  std::vector<std::vector<Matrix>> per_dim;
  for (std::size_t k = 0; k < d; ++k) per_dim.push_back(latent_traversal(model, k, grid, ids));
  for (std::size_t i = 0; i < n_subjects; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const Matrix& block = per_dim[k][i];
      std::copy(block.values().begin(), block.values().end(), stacked.row(row).begin());
      row += block.rows();
    }
  return stacked;
}

inline GroupDiffResult group_difference_pipeline(const Model& model, const MultiSubjectDataset& data,
                                                 const PipelineOptions& opt = {}) {
  if (data.size() != model.spec.n_subjects)
    throw ShapeMismatch("dataset has " + std::to_string(data.size()) + " subjects, model has " +
                        std::to_string(model.spec.n_subjects));
  std::set<int> groups;
  for (const auto& s : data.subjects) {
    if (!s.group) throw MissingLabels("subject '" + s.subject_id + "' has no group label");
    groups.insert(*s.group);
  }
  if (groups.size() != 2) throw DimensionError("pipeline needs exactly two groups, got " + std::to_string(groups.size()));

  const auto grid = opt.grid.values();
  const std::size_t per_subject = model.spec.latent_size * grid.size();
  GroupDiffResult out;
  out.ica = fastica(traversal_stack(model, data.size(), grid), opt.ica);

  auto& report = out.report;
  report.group_a = *groups.begin();
  report.group_b = *groups.rbegin();
  report.q = opt.q;
  report.grid = opt.grid;
  const std::size_t k = opt.ica.k;
  report.subject_weights = Matrix(data.size(), k);
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t r = 0; r < per_subject; ++r)
      for (std::size_t c = 0; c < k; ++c)
        report.subject_weights(i, c) += out.ica.mixing(i * per_subject + r, c) / static_cast<double>(per_subject);

  std::vector<double> pvals;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < data.size(); ++i)
      (*data.subjects[i].group == report.group_a ? a : b).push_back(report.subject_weights(i, c));
    const WelchResult w = welch_t_test(a, b);
    SourceTest st;
    st.source_id = c;
    st.t = w.t;
    st.p = w.p;
    st.degenerate = w.degenerate;
    for (double v : a) st.group_mean_a += v / static_cast<double>(a.size());
    for (double v : b) st.group_mean_b += v / static_cast<double>(b.size());
    report.sources.push_back(st);
    pvals.push_back(w.p);
  }
  const FdrResult fdr = bh_fdr(pvals, opt.q);
  for (std::size_t c = 0; c < k; ++c) {
    report.sources[c].p_adj = fdr.adjusted[c];
    report.sources[c].reject = fdr.reject[c];
  }
  return out;
}

/// Pearson correlation between two equally sized vectors.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("pearson size mismatch");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline nlohmann::json to_json(const GroupDiffReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : r.sources)
    rows.push_back({{"source_id", s.source_id}, {"t", s.t},           {"p", s.p},
                    {"p_adj", s.p_adj},         {"reject", s.reject}, {"degenerate", s.degenerate},
                    {"group_mean_a", s.group_mean_a}, {"group_mean_b", s.group_mean_b}});
  return {{"sources", rows},
          {"group_a", r.group_a},
          {"group_b", r.group_b},
          {"q", r.q},
          {"rejections", r.rejections()},
          {"traversal_grid", {{"lo", r.grid.lo}, {"hi", r.grid.hi}, {"points", r.grid.points}}}};
}

inline std::string report_csv(const GroupDiffReport& r) {
  std::string out = "source_id,t,p,p_adj,reject,group_mean_a,group_mean_b\n";
  for (const auto& s : r.sources) {
    out += std::to_string(s.source_id) + "," + detail::format_double(s.t) + "," + detail::format_double(s.p) +
           "," + detail::format_double(s.p_adj) + "," + (s.reject ? "1" : "0") + "," +
           detail::format_double(s.group_mean_a) + "," + detail::format_double(s.group_mean_b) + "\n";
  }
  return out;
}

/// Spatial maps in the packed dataset format: one single-row record per source.
inline MultiSubjectDataset spatial_maps_dataset(const ICAResult& ica) {
  MultiSubjectDataset maps;
  maps.n_features = ica.sources.cols();
  maps.metadata.generator = "fastica_sources";
  for (std::size_t c = 0; c < ica.sources.rows(); ++c) {
    SubjectRecord rec;
    rec.subject_id = "source_" + std::to_string(c);
    rec.x = ica.sources.rows_subset(std::vector<std::size_t>{c});
    maps.subjects.push_back(std::move(rec));
  }
  return maps;
}

}  // namespace subjmap
