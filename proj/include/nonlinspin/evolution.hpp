#pragma once

// Dense evolution p -> p o p of full distributions and the diagnostics used
// to study it: TV and relative entropy traces, stationarity and pair
// invariance checks, positivity traces.

#include <cmath>
#include <string>
#include <vector>

#include "nonlinspin/common.hpp"
#include "nonlinspin/distribution.hpp"
#include "nonlinspin/ising.hpp"
#include "nonlinspin/kernels.hpp"

namespace nonlinspin {

namespace detail {

inline void check_dense_cap(Dynamics kind, int n, const Caps &caps) {
  const int cap = kind == Dynamics::block ? caps.dense_block : caps.dense_glauber;
  if (n > cap)
    throw CapExceeded(to_string(kind) + " dense collision on " + std::to_string(n) +
                      " sites exceeds cap " + std::to_string(cap));
}

// Spread the low bits of `pattern` over the set bits of `mask`.
inline std::uint64_t deposit_bits(std::uint64_t pattern, std::uint64_t mask) {
  std::uint64_t out = 0;
  for (std::uint64_t m = mask; m != 0 && pattern != 0; m &= m - 1, pattern >>= 1)
    if (pattern & 1U)
      out |= m & (~m + 1);
  return out;
}

inline std::vector<double> block_collide(const DenseDistribution &p, const DenseDistribution &q,
                                         const InteractionMatrix &J) {
  const int n = p.sites();
  const std::uint64_t states = std::uint64_t{1} << n;
  const std::uint64_t all = states - 1;
  std::vector<double> out(states, 0.0);

  for (std::uint64_t d = 0; d < states; ++d) {
    const std::vector<int> sites = SiteSet{d}.sites();
    const int k = static_cast<int>(sites.size());
    const std::uint64_t patterns = std::uint64_t{1} << k;
    const std::uint64_t off = all & ~d;

    std::vector<std::uint64_t> spread(patterns);
    for (std::uint64_t a = 0; a < patterns; ++a)
      spread[a] = deposit_bits(a, d);

    // gamma depends on the pair only through D and sigma restricted to D
    for (std::uint64_t a = 0; a < patterns; ++a) {
      std::vector<double> law = pattern_log_weights(k, [&](int i, int j) {
        const int si = ((a >> i) & 1U) ? 1 : -1;
        const int sj = ((a >> j) & 1U) ? 1 : -1;
        return 2.0 * J(sites[i], sites[j]) * si * sj;
      });
      normalise_log_weights(law);

      const std::uint64_t sigma_d = spread[a];
      // iterate over all assignments off D, including the empty one
      std::uint64_t o = 0;
      do {
        const std::uint64_t s = sigma_d | o;
        const std::uint64_t sp = s ^ d;
        const double w = 0.5 * (p[s] * q[sp] + p[sp] * q[s]);
        if (w != 0.0) {
          // first output agrees with sigma on L and with sigma' on D \ L
          for (std::uint64_t l = 0; l < patterns; ++l)
            out[s ^ spread[(patterns - 1) & ~l]] += w * law[l];
        }
        o = (o - off) & off;
      } while (o != 0);
    }
  }
  return out;
}

inline std::vector<double> glauber_collide(const DenseDistribution &p, const DenseDistribution &q,
                                           const InteractionMatrix &J) {
  const int n = p.sites();
  const std::uint64_t states = std::uint64_t{1} << n;
  // local[s * n + x] = sum_y J_xy s_y
  std::vector<double> local(states * n, 0.0);
  for (std::uint64_t s = 0; s < states; ++s)
    for (int x = 0; x < n; ++x) {
      double v = 0.0;
      for (int y = 0; y < n; ++y)
        v += J(x, y) * (((s >> y) & 1U) ? 1.0 : -1.0);
      local[s * n + x] = v;
    }

  std::vector<double> out(states, 0.0);
  const double inv_n = 1.0 / n;
  for (std::uint64_t s = 0; s < states; ++s) {
    for (std::uint64_t sp = 0; sp < states; ++sp) {
      const double w = 0.5 * (p[s] * q[sp] + p[sp] * q[s]);
      if (w == 0.0)
        continue;
      double moved = 0.0;
      for (std::uint64_t d = s ^ sp; d != 0; d &= d - 1) {
        const int x = std::countr_zero(d);
        const double dx = ((s >> x) & 1U) ? 2.0 : -2.0;
        const double field = local[s * n + x] - local[sp * n + x];
        const double a = 1.0 / (1.0 + std::exp(dx * field)) * inv_n;
        out[s ^ (std::uint64_t{1} << x)] += w * a;
        moved += a;
      }
      out[s] += w * (1.0 - moved);
    }
  }
  return out;
}

} // namespace detail

/// Symmetrised collision product  p o q = 1/2 sum (p(s)q(s') + p(s')q(s)) Q(. | s, s').
inline DenseDistribution collide_dense(const DenseDistribution &p, const DenseDistribution &q, Dynamics kind,
                                       const InteractionMatrix &J, const Caps &caps = default_caps()) {
  require_same_space(p, q);
  require(p.sites() == J.sites(), "distribution and interaction dimensions differ");
  detail::check_dense_cap(kind, p.sites(), caps);
  auto out = kind == Dynamics::block ? detail::block_collide(p, q, J) : detail::glauber_collide(p, q, J);
  // the product of totals squares under iteration, so rounding drift in the
  // mass would otherwise grow doubly exponentially
  double total = 0.0;
  for (double v : out)
    total += v;
  for (double &v : out)
    v /= total;
  return {p.sites(), std::move(out)};
}

/// t iterations of p -> p o p.
inline DenseDistribution evolve(const DenseDistribution &p, Dynamics kind, const InteractionMatrix &J, int t,
                                const Caps &caps = default_caps()) {
  require(t >= 0, "step count must be nonnegative");
  DenseDistribution cur = p;
  for (int step = 0; step < t; ++step)
    cur = collide_dense(cur, cur, kind, J, caps);
  return cur;
}

struct TrajectoryStep {
  int t = 0;
  double tv_to_target = 0.0;
  double relative_entropy = 0.0;
  double min_prob = 0.0;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
};

/// Records TV and relative entropy to `target` at t = 0..t_max.
inline Trajectory trace_evolution(const DenseDistribution &p, Dynamics kind, const InteractionMatrix &J,
                                  const DenseDistribution &target, int t_max,
                                  const Caps &caps = default_caps()) {
  Trajectory traj;
  DenseDistribution cur = p;
  for (int t = 0; t <= t_max; ++t) {
    if (t > 0)
      cur = collide_dense(cur, cur, kind, J, caps);
    traj.steps.push_back({t, tv_distance(cur, target), relative_entropy(cur, target), cur.min_prob()});
  }
  return traj;
}

struct StationarityCheck {
  bool stationary = false;
  double residual = 0.0;
};

inline StationarityCheck check_stationary(const DenseDistribution &p, Dynamics kind, const InteractionMatrix &J,
                                          double tol, const Caps &caps = default_caps()) {
  const double r = tv_distance(collide_dense(p, p, kind, J, caps), p);
  return {r <= tol, r};
}

/// Checks (p x p) Q = p x p on the pair space; exhaustive, n <= 3.
inline StationarityCheck check_pair_invariance(const DenseDistribution &p, Dynamics kind,
                                               const InteractionMatrix &J, double tol) {
  require(p.sites() == J.sites(), "distribution and interaction dimensions differ");
  const KernelMatrix q = kernel_matrix(kind, J);
  const std::uint64_t states = q.states();
  double worst = 0.0;
  for (std::uint64_t t = 0; t < states; ++t)
    for (std::uint64_t tp = 0; tp < states; ++tp) {
      double mass = 0.0;
      for (std::uint64_t s = 0; s < states; ++s)
        for (std::uint64_t sp = 0; sp < states; ++sp)
          mass += p[s] * p[sp] * q(s, sp, t, tp);
      worst = std::max(worst, std::abs(mass - p[t] * p[tp]));
    }
  return {worst <= tol, worst};
}

/// Smallest probability of each T_t(p), t = 0..t_max. Requires every
/// marginal to be strictly inside (0,1).
inline std::vector<double> positivity_trace(const DenseDistribution &p, Dynamics kind,
                                            const InteractionMatrix &J, int t_max,
                                            const Caps &caps = default_caps()) {
  for (double m : marginals(p))
    require(m > 0.0 && m < 1.0, "initial distribution has degenerate marginals");
  std::vector<double> out;
  DenseDistribution cur = p;
  for (int t = 0; t <= t_max; ++t) {
    if (t > 0)
      cur = collide_dense(cur, cur, kind, J, caps);
    out.push_back(cur.min_prob());
  }
  return out;
}

} // namespace nonlinspin
