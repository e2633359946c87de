#pragma once

// Dense probability vectors over all 2^n spin configurations, indexed by
// configuration bitmask.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nonlinspin/common.hpp"

namespace nonlinspin {

class DenseDistribution {
public:
  DenseDistribution() = default;

  /// Takes ownership of `probs`, which must have length 2^n.
  DenseDistribution(int n, std::vector<double> probs) : n_(n), probs_(std::move(probs)) {
    check_site_count(n);
    require(n <= 30, "dense distribution limited to 30 sites");
    require(probs_.size() == (std::size_t{1} << n), "probability vector must have length 2^n");
  }

  static DenseDistribution uniform(int n) {
    check_site_count(n);
    const std::size_t size = std::size_t{1} << n;
    return {n, std::vector<double>(size, 1.0 / static_cast<double>(size))};
  }

  static DenseDistribution point(int n, SpinConfig sigma) {
    check_site_count(n);
    std::vector<double> p(std::size_t{1} << n, 0.0);
    require(sigma.bits < p.size(), "point mass outside configuration space");
    p[sigma.bits] = 1.0;
    return {n, std::move(p)};
  }

  /// Independent spins with P(sigma_x = +1) = plus[x].
  static DenseDistribution product(std::span<const double> plus) {
    const int n = static_cast<int>(plus.size());
    check_site_count(n);
    for (double m : plus)
      require(m >= 0.0 && m <= 1.0, "product marginals must lie in [0,1]");
    std::vector<double> p(std::size_t{1} << n, 1.0);
    for (std::size_t s = 0; s < p.size(); ++s)
      for (int x = 0; x < n; ++x)
        p[s] *= ((s >> x) & 1U) ? plus[x] : 1.0 - plus[x];
    return {n, std::move(p)};
  }

  int sites() const { return n_; }
  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t s) const { return probs_[s]; }
  double operator[](SpinConfig s) const { return probs_[s.bits]; }
  std::span<const double> probs() const { return probs_; }

  double total() const {
    double sum = 0.0;
    for (double v : probs_)
      sum += v;
    return sum;
  }

  double min_prob() const {
    double m = std::numeric_limits<double>::infinity();
    for (double v : probs_)
      m = std::min(m, v);
    return m;
  }

private:
  int n_ = 0;
  std::vector<double> probs_;
};

inline void require_same_space(const DenseDistribution &p, const DenseDistribution &q) {
  require(p.sites() == q.sites(), "distributions live on different site counts");
}

/// Per-site probabilities P(sigma_x = +1).
inline std::vector<double> marginals(const DenseDistribution &p) {
  const int n = p.sites();
  std::vector<double> plus(n, 0.0);
  for (std::size_t s = 0; s < p.size(); ++s) {
    const double w = p[s];
    if (w == 0.0)
      continue;
    for (std::uint64_t m = s; m != 0; m &= m - 1)
      plus[std::countr_zero(m)] += w;
  }
  return plus;
}

/// Total variation distance, half the L1 distance.
inline double tv_distance(const DenseDistribution &p, const DenseDistribution &q) {
  require_same_space(p, q);
  double sum = 0.0;
  for (std::size_t s = 0; s < p.size(); ++s)
    sum += std::abs(p[s] - q[s]);
  return 0.5 * sum;
}

/// D(p || mu) in nats. Evaluated as sum mu * ((1+e) log1p(e) - e) with
/// e = p/mu - 1, which stays accurate when p is close to mu.
inline double relative_entropy(const DenseDistribution &p, const DenseDistribution &mu) {
  require_same_space(p, mu);
  double sum = 0.0;
  for (std::size_t s = 0; s < p.size(); ++s) {
    const double m = mu[s];
    require(m > 0.0, "reference measure must be strictly positive");
    const double e = p[s] / m - 1.0;
    const double term = p[s] == 0.0 ? 1.0 : (1.0 + e) * std::log1p(e) - e;
    sum += m * term;
  }
  return std::max(sum, 0.0);
}

/// Reads `<bitmask> <prob>` lines. Missing states are zero; the total must
/// be within 1e-9 of one, in which case the vector is renormalised.
inline DenseDistribution parse_distribution(std::istream &in, int n) {
  check_site_count(n);
  std::vector<double> p(std::size_t{1} << n, 0.0);
  std::vector<bool> seen(p.size(), false);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos)
      line.erase(hash);
    std::istringstream ls(line);
    std::uint64_t mask = 0;
    double prob = 0.0;
    if (!(ls >> mask))
      continue;
    require(static_cast<bool>(ls >> prob), "line " + std::to_string(lineno) + ": missing probability");
    require(mask < p.size(), "line " + std::to_string(lineno) + ": bitmask out of range");
    require(!seen[mask], "line " + std::to_string(lineno) + ": duplicate state");
    require(prob >= 0.0 && std::isfinite(prob), "line " + std::to_string(lineno) + ": bad probability");
    seen[mask] = true;
    p[mask] = prob;
  }
  double total = 0.0;
  for (double v : p)
    total += v;
  require(std::abs(total - 1.0) <= 1e-9, "distribution total differs from 1 by more than 1e-9");
  for (double &v : p)
    v /= total;
  return {n, std::move(p)};
}

inline DenseDistribution load_distribution(const std::string &path, int n) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open distribution file " + path);
  return parse_distribution(in, n);
}

inline void write_distribution(std::ostream &out, const DenseDistribution &p) {
  out << std::setprecision(17);
  for (std::size_t s = 0; s < p.size(); ++s)
    if (p[s] != 0.0)
      out << s << ' ' << p[s] << '\n';
}

} // namespace nonlinspin
