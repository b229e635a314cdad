#pragma once

// Two-sample Welch t-test, Benjamini–Hochberg FDR adjustment and Spearman
// rank correlation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "subjmap/errors.hpp"

namespace subjmap {

struct WelchResult {
  double t = 0.0;
  double p = 1.0;   // two-sided
  double df = 0.0;  // Welch–Satterthwaite
  // Both samples have zero variance. Equal means give t=0, p=1; differing
  // means give the p=0 limit with t=±inf.
  bool degenerate = false;
};

namespace detail {

inline void mean_var(std::span<const double> x, double& mean, double& var) {
  mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size() - 1);
}

}  // namespace detail

inline WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw DimensionError("welch_t_test needs at least 2 values per group");
  double ma, va, mb, vb;
  detail::mean_var(a, ma, va);
  detail::mean_var(b, mb, vb);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  const double se2 = sa + sb;

  WelchResult r;
  if (se2 == 0.0) {
    r.degenerate = true;
    r.df = na + nb - 2.0;
    if (ma == mb) return r;
    r.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  const boost::math::students_t dist(r.df);
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

struct FdrResult {
  std::vector<double> adjusted;
  std::vector<bool> reject;
};

/// Benjamini–Hochberg step-up adjustment, returned in input order.
inline FdrResult bh_fdr(std::span<const double> p, double q = 0.05) {
  for (double v : p)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidP("p-value " + std::to_string(v) + " outside [0, 1]");
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return p[i] < p[j]; });

  FdrResult r{std::vector<double>(m), std::vector<bool>(m)};
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const std::size_t i = order[k];
    running = std::min(running, p[i] * static_cast<double>(m) / static_cast<double>(k + 1));
    r.adjusted[i] = running;
  }
  for (std::size_t i = 0; i < m; ++i) r.reject[i] = r.adjusted[i] <= q;
  return r;
}

/// Ranks starting at 1, ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> ranks(x.size());
  for (std::size_t a = 0; a < order.size();) {
    std::size_t b = a;
    while (b + 1 < order.size() && x[order[b + 1]] == x[order[a]]) ++b;
    const double r = 0.5 * static_cast<double>(a + b) + 1.0;
    for (std::size_t k = a; k <= b; ++k) ranks[order[k]] = r;
    a = b + 1;
  }
  return ranks;
}

/// Spearman rank correlation (Pearson on average ranks). Zero when either
/// side is constant.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("spearman needs two equal samples of size >= 2");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace subjmap
