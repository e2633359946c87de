#pragma once

// Ising parameters (J, h), exact Gibbs computation and field inference.

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nonlinspin/common.hpp"
#include "nonlinspin/distribution.hpp"

namespace nonlinspin {

/// Symmetric coupling matrix with zero diagonal.
class InteractionMatrix {
public:
  InteractionMatrix() = default;
  explicit InteractionMatrix(int n) : n_(n), entries_(static_cast<std::size_t>(n) * n, 0.0) {
    check_site_count(n);
  }

  int sites() const { return n_; }
  double operator()(int x, int y) const { return entries_[index(x, y)]; }

  void set(int x, int y, double value) {
    require(x >= 0 && x < n_ && y >= 0 && y < n_, "coupling index out of range");
    require(x != y, "diagonal couplings must be zero");
    require(std::isfinite(value), "coupling must be finite");
    entries_[index(x, y)] = value;
    entries_[index(y, x)] = value;
  }

  /// Sites y with J_xy != 0.
  SiteSet neighbours(int x) const {
    SiteSet out;
    for (int y = 0; y < n_; ++y)
      if (y != x && (*this)(x, y) != 0.0)
        out.insert(y);
    return out;
  }

  bool is_zero() const {
    for (double v : entries_)
      if (v != 0.0)
        return false;
    return true;
  }

  InteractionMatrix scaled(double factor) const {
    InteractionMatrix out = *this;
    for (double &v : out.entries_)
      v *= factor;
    return out;
  }

private:
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(x) * n_ + y; }

  int n_ = 0;
  std::vector<double> entries_;
};

/// External fields, one per site.
struct FieldVector {
  std::vector<double> h;

  FieldVector() = default;
  explicit FieldVector(int n) : h(n, 0.0) {}
  explicit FieldVector(std::vector<double> values) : h(std::move(values)) {}

  int sites() const { return static_cast<int>(h.size()); }
  double operator[](int x) const { return h[x]; }
  double &operator[](int x) { return h[x]; }
};

inline void require_dims(const InteractionMatrix &J, const FieldVector &h) {
  require(J.sites() == h.sites(), "interaction and field dimensions differ");
}

/// (1/2) sum_{x,y} J_xy s_x s_y + sum_x h_x s_x.
inline double energy(SpinConfig sigma, const InteractionMatrix &J, const FieldVector &h) {
  require_dims(J, h);
  const int n = J.sites();
  double e = 0.0;
  for (int x = 0; x < n; ++x) {
    const int sx = sigma.spin(x);
    e += h[x] * sx;
    for (int y = x + 1; y < n; ++y)
      e += J(x, y) * sx * sigma.spin(y);
  }
  return e;
}

/// Interaction-only energy, h = 0.
inline double energy(SpinConfig sigma, const InteractionMatrix &J) {
  return energy(sigma, J, FieldVector(J.sites()));
}

/// max_x sum_y |J_xy|.
inline double dobrushin_norm(const InteractionMatrix &J) {
  double best = 0.0;
  for (int x = 0; x < J.sites(); ++x) {
    double row = 0.0;
    for (int y = 0; y < J.sites(); ++y)
      row += std::abs(J(x, y));
    best = std::max(best, row);
  }
  return best;
}

namespace detail {

/// Calls visit(state, energy) for every configuration in Gray-code order,
/// updating the energy incrementally in O(n) per step.
template <class Visit>
void for_each_energy(const InteractionMatrix &J, const FieldVector &h, Visit &&visit) {
  const int n = J.sites();
  std::uint64_t state = 0;
  double e = energy(SpinConfig{0}, J, h);
  // local[x] = h_x + sum_y J_xy s_y for the current state
  std::vector<double> local(n);
  for (int x = 0; x < n; ++x) {
    local[x] = h[x];
    for (int y = 0; y < n; ++y)
      local[x] -= J(x, y);
  }
  visit(state, e);
  const std::uint64_t count = std::uint64_t{1} << n;
  for (std::uint64_t k = 1; k < count; ++k) {
    const int x = std::countr_zero(k);
    const int sx = ((state >> x) & 1U) ? 1 : -1;
    e -= 2.0 * sx * local[x];
    state ^= std::uint64_t{1} << x;
    for (int y = 0; y < n; ++y)
      local[y] -= 2.0 * sx * J(y, x);
    visit(state, e);
  }
}

inline double log_sum_exp(const std::vector<double> &v) {
  double top = -std::numeric_limits<double>::infinity();
  for (double x : v)
    top = std::max(top, x);
  double s = 0.0;
  for (double x : v)
    s += std::exp(x - top);
  return top + std::log(s);
}

} // namespace detail

/// mu_{J,h} as a normalised dense vector together with log Z.
class GibbsModel {
public:
  GibbsModel(InteractionMatrix J, FieldVector h, int exact_cap = default_caps().exact)
      : J_(std::move(J)), h_(std::move(h)) {
    require_dims(J_, h_);
    if (J_.sites() > exact_cap)
      throw CapExceeded("Gibbs distribution on " + std::to_string(J_.sites()) +
                        " sites exceeds exact cap " + std::to_string(exact_cap));
    const int n = J_.sites();
    std::vector<double> logw(std::size_t{1} << n);
    detail::for_each_energy(J_, h_, [&](std::uint64_t s, double e) { logw[s] = e; });
    log_z_ = detail::log_sum_exp(logw);
    for (double &v : logw)
      v = std::exp(v - log_z_);
    probs_ = DenseDistribution(n, std::move(logw));
  }

  const InteractionMatrix &interaction() const { return J_; }
  const FieldVector &fields() const { return h_; }
  double log_partition() const { return log_z_; }
  const DenseDistribution &distribution() const { return probs_; }

private:
  InteractionMatrix J_;
  FieldVector h_;
  double log_z_ = 0.0;
  DenseDistribution probs_;
};

inline DenseDistribution gibbs_distribution(const InteractionMatrix &J, const FieldVector &h,
                                            int exact_cap = default_caps().exact) {
  return GibbsModel(J, h, exact_cap).distribution();
}

struct FieldSolveOptions {
  double tol = 1e-10;   // infinity-norm residual on marginals
  int max_iterations = 200;
  int exact_cap = default_caps().exact;
};

/// Finds h with marginals(mu_{J,h}) = target by damped Newton ascent on the
/// concave log-likelihood  L(h) = sum_x h_x m_x - log Z(h),  m_x = 2 target_x - 1.
/// Throws NumericalFailure if the residual stays above tol.
inline FieldVector solve_fields(const InteractionMatrix &J, std::span<const double> target,
                                const FieldSolveOptions &opt = {}) {
  const int n = J.sites();
  require(static_cast<int>(target.size()) == n, "target marginal count differs from site count");
  for (double m : target)
    require(m > 0.0 && m < 1.0, "target marginals must lie strictly inside (0,1)");
  if (n > opt.exact_cap)
    throw CapExceeded("solve_fields on " + std::to_string(n) + " sites exceeds exact cap");

  Eigen::VectorXd mag(n);
  for (int x = 0; x < n; ++x)
    mag[x] = 2.0 * target[x] - 1.0;

  FieldVector h(n);
  for (int x = 0; x < n; ++x)
    h[x] = std::atanh(mag[x]);

  struct Moments {
    double log_z;
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
  };
  auto moments = [&](const FieldVector &fields) {
    GibbsModel model(J, fields, opt.exact_cap);
    const auto &p = model.distribution();
    Moments m{model.log_partition(), Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, n)};
    Eigen::VectorXd s(n);
    for (std::size_t st = 0; st < p.size(); ++st) {
      for (int x = 0; x < n; ++x)
        s[x] = ((st >> x) & 1U) ? 1.0 : -1.0;
      m.mean.noalias() += p[st] * s;
      m.cov.noalias() += p[st] * s * s.transpose();
    }
    m.cov -= m.mean * m.mean.transpose();
    return m;
  };
  auto likelihood = [&](const FieldVector &fields, double log_z) {
    double v = -log_z;
    for (int x = 0; x < n; ++x)
      v += fields[x] * mag[x];
    return v;
  };

  Moments cur = moments(h);
  double residual = 0.0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    Eigen::VectorXd grad = mag - cur.mean;
    residual = 0.5 * grad.cwiseAbs().maxCoeff();
    if (residual <= opt.tol)
      return h;
    Eigen::VectorXd step = cur.cov.ldlt().solve(grad);
    if (!step.allFinite())
      step = grad;
    const double base = likelihood(h, cur.log_z);
    double scale = 1.0;
    bool accepted = false;
    for (int back = 0; back < 60; ++back, scale *= 0.5) {
      FieldVector trial(n);
      for (int x = 0; x < n; ++x)
        trial[x] = h[x] + scale * step[x];
      Moments next = moments(trial);
      // accept on likelihood increase, or on a smaller gradient once the
      // likelihood differences fall below rounding
      const double gain = likelihood(trial, next.log_z) - base;
      const double next_res = 0.5 * (mag - next.mean).cwiseAbs().maxCoeff();
      if (gain > 0.0 || (gain > -1e-13 && next_res < residual)) {
        h = std::move(trial);
        cur = std::move(next);
        accepted = true;
        break;
      }
    }
    if (!accepted)
      break;
  }
  residual = 0.5 * (mag - cur.mean).cwiseAbs().maxCoeff();
  if (residual <= opt.tol)
    return h;
  throw NumericalFailure("solve_fields did not converge", residual);
}

/// Couplings J_xy = value on every pair whose row sums equal `norm`.
inline InteractionMatrix uniform_interaction(int n, double norm) {
  InteractionMatrix J(n);
  if (n < 2)
    return J;
  const double v = norm / (n - 1);
  for (int x = 0; x < n; ++x)
    for (int y = x + 1; y < n; ++y)
      J.set(x, y, v);
  return J;
}

/// Random signed couplings rescaled so that the Dobrushin norm equals `norm`.
inline InteractionMatrix random_interaction(int n, double norm, Rng &rng) {
  InteractionMatrix J(n);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int x = 0; x < n; ++x)
    for (int y = x + 1; y < n; ++y)
      J.set(x, y, u(rng));
  const double d = dobrushin_norm(J);
  return d > 0.0 ? J.scaled(norm / d) : J;
}

/// Model file: `n <int>`, `J <x> <y> <value>` (each pair once), `h <x> <value>`.
struct ModelSpec {
  InteractionMatrix J;
  FieldVector h;
};

inline ModelSpec parse_model(std::istream &in) {
  std::string line;
  int lineno = 0;
  int n = -1;
  ModelSpec spec;
  std::set<std::pair<int, int>> pairs;
  std::set<int> fields;
  auto fail = [&](const std::string &msg) {
    throw InvalidArgument("model line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos)
      line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key))
      continue;
    if (key == "n") {
      if (n != -1)
        fail("duplicate header");
      if (!(ls >> n) || n < 1 || n > kMaxSites)
        fail("bad site count");
      spec.J = InteractionMatrix(n);
      spec.h = FieldVector(n);
    } else if (key == "J") {
      if (n == -1)
        fail("J before header");
      int x = 0, y = 0;
      double v = 0.0;
      if (!(ls >> x >> y >> v))
        fail("expected J <x> <y> <value>");
      if (x < 0 || y < 0 || x >= n || y >= n || x == y)
        fail("index out of range");
      if (!pairs.insert({std::min(x, y), std::max(x, y)}).second)
        fail("duplicate pair");
      spec.J.set(x, y, v);
    } else if (key == "h") {
      if (n == -1)
        fail("h before header");
      int x = 0;
      double v = 0.0;
      if (!(ls >> x >> v))
        fail("expected h <x> <value>");
      if (x < 0 || x >= n)
        fail("index out of range");
      if (!fields.insert(x).second)
        fail("duplicate field");
      spec.h[x] = v;
    } else {
      fail("unknown record '" + key + "'");
    }
    std::string extra;
    if (ls >> extra)
      fail("trailing tokens");
  }
  if (n == -1)
    throw InvalidArgument("model file has no header");
  return spec;
}

inline ModelSpec load_model(const std::string &path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open model file " + path);
  return parse_model(in);
}

inline void write_model(std::ostream &out, const InteractionMatrix &J, const FieldVector &h) {
  require_dims(J, h);
  out << std::setprecision(17) << "n " << J.sites() << '\n';
  for (int x = 0; x < J.sites(); ++x)
    for (int y = x + 1; y < J.sites(); ++y)
      if (J(x, y) != 0.0)
        out << "J " << x << ' ' << y << ' ' << J(x, y) << '\n';
  for (int x = 0; x < h.sites(); ++x)
    if (h[x] != 0.0)
      out << "h " << x << ' ' << h[x] << '\n';
}

} // namespace nonlinspin
