#pragma once

// Monte Carlo summaries: Wilson intervals and log-linear decay fits.

#include <charconv>
#include <cmath>
#include <string>
#include <cstddef>
#include <span>
#include <vector>

#include "nonlinspin/common.hpp"

namespace nonlinspin {

/// z for a two-sided 99.73% interval ("3 SE").
inline constexpr double kThreeSigma = 3.0;

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Wilson score interval for `successes` out of `trials`.
inline Interval wilson_interval(std::size_t successes, std::size_t trials, double z = kThreeSigma) {
  require(trials > 0, "wilson interval needs at least one trial");
  require(successes <= trials, "more successes than trials");
  const double n = static_cast<double>(trials);
  const double p = successes / n;
  const double z2 = z * z;
  const double centre = (p + z2 / (2 * n)) / (1 + z2 / n);
  const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n);
  // the endpoints are exact at the boundary; rounding would otherwise shave them
  return {successes == 0 ? 0.0 : std::max(0.0, centre - half),
          successes == trials ? 1.0 : std::min(1.0, centre + half)};
}

/// Plain binomial standard error sqrt(p(1-p)/n).
inline double binomial_se(double p, std::size_t trials) {
  return std::sqrt(p * (1.0 - p) / static_cast<double>(trials));
}

/// Least squares fit of log y = a - rate * t. Points with y <= 0 are skipped.
struct ExponentialFit {
  double rate = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t points = 0;
};

inline ExponentialFit fit_exponential(std::span<const double> t, std::span<const double> y) {
  require(t.size() == y.size(), "fit inputs differ in length");
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (y[i] > 0.0 && std::isfinite(y[i])) {
      xs.push_back(t[i]);
      ys.push_back(std::log(y[i]));
    }
  ExponentialFit fit;
  fit.points = xs.size();
  if (xs.size() < 2)
    return fit;
  const double m = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i] / m;
    my += ys[i] / m;
  }
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0)
    return fit;
  const double slope = sxy / sxx;
  fit.rate = -slope;
  fit.intercept = my - slope * mx;
  fit.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

/// Shortest round-trip decimal form; NaN prints as an empty field.
inline std::string format_number(double v) {
  if (std::isnan(v))
    return {};
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

} // namespace nonlinspin
