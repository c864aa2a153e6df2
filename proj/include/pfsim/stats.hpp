#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace pfsim::stats {

inline double mean(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("mean of empty sample");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

// Unbiased (n - 1) sample variance.
inline double variance(std::span<const double> x) {
  if (x.size() < 2) throw std::invalid_argument("variance needs at least two values");
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return ss / static_cast<double>(x.size() - 1);
}

// Linear-interpolation quantile (Hyndman-Fan type 7, the R default).
inline double quantile(std::vector<double> x, double p) {
  if (x.empty()) throw std::invalid_argument("quantile of empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile probability outside [0,1]");
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

inline double quantile(std::span<const double> x, double p) { return quantile(std::vector<double>(x.begin(), x.end()), p); }

inline double correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("correlation: size mismatch");
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Upper tail 1 - Phi(x) through erfc; keeps full relative precision far
// into the tail (1 - Phi(10) ~ 7.6e-24) where 1 - std::erf rounds to zero.
inline double normal_upper_tail(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Standard error of the mean of a correlated series by non-overlapping batch
// means.
inline double batch_means_se(std::span<const double> x, std::size_t batches) {
  const std::size_t len = x.size() / batches;
  if (batches < 2 || len < 1) throw std::invalid_argument("batch_means_se: series too short");
  std::vector<double> bm(batches);
  for (std::size_t b = 0; b < batches; ++b)
    bm[b] = mean(x.subspan(b * len, len));
  return std::sqrt(variance(bm) / static_cast<double>(batches));
}

}  // namespace pfsim::stats
