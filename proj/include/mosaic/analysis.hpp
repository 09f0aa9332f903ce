#pragma once

// Offline statistics: WPGMA clustering, Welch's t-test, percentile bootstrap,
// and t-intervals over seeds.

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "mosaic/error.hpp"
#include "mosaic/rng.hpp"

namespace mosaic::stats {

// --- clustering ---------------------------------------------------------------

struct Merge {
  int a = 0;  // cluster ids: leaves are 0..n-1, merge k creates n + k
  int b = 0;
  double height = 0.0;
  std::vector<int> leaves;  // sorted members of the new cluster
};

struct Dendrogram {
  int n = 0;
  std::vector<Merge> merges;

  /// Leaf order from a left-to-right walk of the tree.
  std::vector<int> leaf_order() const {
    std::vector<int> out;
    if (n == 0) return out;
    if (merges.empty()) return {0};
    std::vector<int> stack{n + static_cast<int>(merges.size()) - 1};
    while (!stack.empty()) {
      const int c = stack.back();
      stack.pop_back();
      if (c < n) {
        out.push_back(c);
        continue;
      }
      const Merge& m = merges[static_cast<std::size_t>(c - n)];
      stack.push_back(m.b);
      stack.push_back(m.a);
    }
    return out;
  }

  /// The two leaf sets joined by the final merge.
  std::pair<std::vector<int>, std::vector<int>> top_split() const {
    if (merges.empty()) throw InvalidArgument("dendrogram has no merges");
    const Merge& root = merges.back();
    return {members(root.a), members(root.b)};
  }

  std::vector<int> members(int cluster) const {
    if (cluster < n) return {cluster};
    return merges[static_cast<std::size_t>(cluster - n)].leaves;
  }
};

/// 1 - S with an exact zero diagonal.
inline Eigen::MatrixXd distance_from_similarity(const Eigen::MatrixXd& s) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Ones(s.rows(), s.cols()) - s;
  d.diagonal().setZero();
  return d;
}

/// Weighted pair-group clustering: merge the closest pair, then
/// d(a+b, x) = (d(a, x) + d(b, x)) / 2 regardless of cluster sizes. Ties go to
/// the lowest (a, b) id pair.
inline Dendrogram wpgma(const Eigen::MatrixXd& dist, double symmetry_tol = 1e-9) {
  const auto n = static_cast<int>(dist.rows());
  if (dist.cols() != n) throw ShapeMismatch("distance matrix must be square");
  if (n < 2) throw InvalidArgument("clustering needs at least two items");
  if (!dist.allFinite()) throw InvalidArgument("distance matrix has non-finite entries");
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (std::abs(dist(i, j) - dist(j, i)) > symmetry_tol) {
        throw InvalidArgument("distance matrix is not symmetric at (" + std::to_string(i) + ", " + std::to_string(j) +
                              ")");
      }
    }
  }

  const int total = 2 * n - 1;
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(total, total);
  d.topLeftCorner(n, n) = dist;
  std::vector<int> active(static_cast<std::size_t>(n));
  std::iota(active.begin(), active.end(), 0);

  Dendrogram out;
  out.n = n;
  std::vector<std::vector<int>> members(static_cast<std::size_t>(total));
  for (int i = 0; i < n; ++i) members[static_cast<std::size_t>(i)] = {i};

  for (int k = 0; k < n - 1; ++k) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 1;
    for (std::size_t i = 0; i < active.size(); ++i) {
      for (std::size_t j = i + 1; j < active.size(); ++j) {
        const double v = d(active[i], active[j]);
        if (v < best) {
          best = v;
          bi = i;
          bj = j;
        }
      }
    }
    const int a = active[bi];
    const int b = active[bj];
    const int c = n + k;
    for (int x : active) {
      if (x == a || x == b) continue;
      const double v = 0.5 * (d(a, x) + d(b, x));
      d(c, x) = v;
      d(x, c) = v;
    }
    auto& mc = members[static_cast<std::size_t>(c)];
    mc = members[static_cast<std::size_t>(a)];
    mc.insert(mc.end(), members[static_cast<std::size_t>(b)].begin(), members[static_cast<std::size_t>(b)].end());
    std::sort(mc.begin(), mc.end());
    out.merges.push_back(Merge{a, b, best, mc});
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bj));
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bi));
    active.push_back(c);
  }
  return out;
}

// --- tests and intervals ------------------------------------------------------

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
};

inline double mean(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Unbiased (n - 1) sample variance.
inline double variance(std::span<const double> x) {
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
inline WelchResult welch_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw InvalidArgument("welch_t needs at least two observations per sample");
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double sa = variance(a) / na;
  const double sb = variance(b) / nb;
  if (!(sa + sb > 0.0)) throw InvalidArgument("welch_t: both samples have zero variance");
  WelchResult r;
  r.t = (mean(a) - mean(b)) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  // P(|T| > |t|) = I_{df / (df + t^2)}(df / 2, 1 / 2)
  r.p = boost::math::ibeta(r.df / 2.0, 0.5, r.df / (r.df + r.t * r.t));
  return r;
}

/// Type-7 (linear interpolation) quantile of sorted data.
inline double quantile_sorted(std::span<const double> s, double p) {
  if (s.empty()) throw InvalidArgument("quantile of an empty sample");
  const double h = static_cast<double>(s.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= s.size()) return s.back();
  return s[lo] + (h - static_cast<double>(lo)) * (s[lo + 1] - s[lo]);
}

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Percentile bootstrap of the mean. Resample b draws n indices with
/// Rng(seed).index(n) and averages in draw order.
inline Interval bootstrap_ci(std::span<const double> x, int resamples = 10000, double alpha = 0.05,
                             std::uint64_t seed = 0) {
  if (x.size() < 2) throw InvalidArgument("bootstrap_ci needs at least two observations");
  if (resamples < 1) throw InvalidArgument("bootstrap_ci needs at least one resample");
  Rng rng(seed);
  const std::size_t n = x.size();
  std::vector<double> stats(static_cast<std::size_t>(resamples));
  for (auto& s : stats) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[rng.index(n)];
    s = acc / static_cast<double>(n);
  }
  std::sort(stats.begin(), stats.end());
  return {quantile_sorted(stats, alpha / 2.0), quantile_sorted(stats, 1.0 - alpha / 2.0)};
}

/// Paired version: bootstrap of mean(a_i - b_i).
inline Interval bootstrap_ci(std::span<const double> a, std::span<const double> b, int resamples, double alpha,
                             std::uint64_t seed) {
  if (a.size() != b.size()) throw ShapeMismatch("paired bootstrap needs equal sample sizes");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return bootstrap_ci(d, resamples, alpha, seed);
}

struct MeanCi {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
  int n = 0;
  bool degenerate = false;  // a single observation: the interval is the point
};

/// Student-t interval for the mean over independent runs.
inline MeanCi t_interval(std::span<const double> x, double confidence = 0.95) {
  if (x.empty()) throw InvalidArgument("t_interval of an empty sample");
  MeanCi r;
  r.n = static_cast<int>(x.size());
  r.mean = mean(x);
  if (x.size() < 2) {
    r.low = r.high = r.mean;
    r.degenerate = true;
    return r;
  }
  const boost::math::students_t dist(static_cast<double>(x.size() - 1));
  const double q = boost::math::quantile(dist, 0.5 + confidence / 2.0);
  const double half = q * std::sqrt(variance(x) / static_cast<double>(x.size()));
  r.low = r.mean - half;
  r.high = r.mean + half;
  return r;
}

}  // namespace mosaic::stats
