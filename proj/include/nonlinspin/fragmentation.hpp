#pragma once

// Backward processes on site sets: fragmentation plus noise (block dynamics),
// coupon collecting plus noise (Glauber dynamics), the labeled branching
// process that dominates them, and Monte Carlo extinction estimates.

#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "nonlinspin/common.hpp"
#include "nonlinspin/graph.hpp"
#include "nonlinspin/ising.hpp"
#include "nonlinspin/stats.hpp"

namespace nonlinspin {

enum class ProcessKind { fragmentation, coupon };

inline std::string to_string(ProcessKind kind) {
  return kind == ProcessKind::fragmentation ? "fragmentation" : "coupon";
}

/// A nonempty fragment. `label` holds the left/right choices leading to it
/// (0 = first child), most recent choice in the lowest bit; only the last 64
/// generations are kept.
struct Fragment {
  std::uint64_t label = 0;
  SiteSet sites;
};

struct FragmentState {
  int t = 0;
  std::vector<Fragment> fragments;
  std::size_t branching_events = 0; // splits with two nonempty children

  bool dead() const { return fragments.empty(); }
};

/// Children of one split together with the noise part: A' for fragmentation,
/// V_G for the coupon process.
struct SplitTrace {
  SiteSet first, second, grown;
};

/// Fragmentation map: kill if |A| <= 1, otherwise G ~ nu_J, A' = closure(G, A),
/// A \ A' split by fair coins, children (A' u A_in, A' u A_out).
inline SplitTrace phi_split_traced(SiteSet a, const GraphWeights &w, Rng &rng) {
  if (a.size() <= 1)
    return {};
  const SiteSet grown = closure(er_sample(w, rng), a);
  SiteSet in, out;
  for (int x : a.minus(grown).sites())
    (fair_coin(rng) ? in : out).insert(x);
  return {grown | in, grown | out, grown};
}

inline std::pair<SiteSet, SiteSet> phi_split(SiteSet a, const GraphWeights &w, Rng &rng) {
  const auto s = phi_split_traced(a, w, rng);
  return {s.first, s.second};
}

inline std::pair<SiteSet, SiteSet> phi_split(SiteSet a, const InteractionMatrix &J, Rng &rng) {
  return phi_split(a, GraphWeights(J), rng);
}

/// Coupon map: uniform x, star graph G ~ nu^x_J, fair coin B.
inline SplitTrace psi_split_traced(SiteSet a, const GraphWeights &w, Rng &rng) {
  if (a.size() <= 1)
    return {};
  const int x = uniform_site(w.sites(), rng);
  if (!a.contains(x))
    return {a, {}, {}};
  const LabeledGraph g = star_sample(x, w, rng);
  if (g.empty()) {
    if (fair_coin(rng)) {
      SiteSet rest = a;
      rest.erase(x);
      return {rest, {}, {}};
    }
    return {a, {}, {}};
  }
  const SiteSet v = g.vertices();
  return {a | v, v, v};
}

inline std::pair<SiteSet, SiteSet> psi_split(SiteSet a, const GraphWeights &w, Rng &rng) {
  const auto s = psi_split_traced(a, w, rng);
  return {s.first, s.second};
}

inline std::pair<SiteSet, SiteSet> psi_split(SiteSet a, const InteractionMatrix &J, Rng &rng) {
  return psi_split(a, GraphWeights(J), rng);
}

inline constexpr std::size_t kDefaultFragmentGuard = 1'000'000;

inline FragmentState initial_fragments(int n) {
  check_site_count(n);
  return {0, {Fragment{0, SiteSet::full(n)}}, 0};
}

/// One generation: every stored fragment is replaced by its nonempty children.
inline FragmentState step_fragments(const FragmentState &state, ProcessKind kind, const GraphWeights &w, Rng &rng) {
  FragmentState next{state.t + 1, {}, state.branching_events};
  next.fragments.reserve(state.fragments.size() * 2);
  for (const Fragment &f : state.fragments) {
    const auto s = kind == ProcessKind::fragmentation ? phi_split_traced(f.sites, w, rng)
                                                      : psi_split_traced(f.sites, w, rng);
    if (!s.first.empty())
      next.fragments.push_back({f.label << 1, s.first});
    if (!s.second.empty())
      next.fragments.push_back({(f.label << 1) | 1U, s.second});
    if (!s.first.empty() && !s.second.empty())
      ++next.branching_events;
  }
  return next;
}

struct ExtinctionRun {
  int extinction_time = 0; // first t with no fragments, t_max + 1 if still alive
  bool guard_exceeded = false;
  std::size_t peak_fragments = 0;
};

/// Runs from F_0 = [n] until extinction, t_max, or more than `guard` fragments.
/// A guard hit counts as alive through t_max.
inline ExtinctionRun run_process(ProcessKind kind, int n, const GraphWeights &w, int t_max, Rng &rng,
                                 std::size_t guard = kDefaultFragmentGuard) {
  require(w.sites() == n, "graph weights and site count differ");
  require(t_max >= 0, "t_max must be nonnegative");
  FragmentState state = initial_fragments(n);
  ExtinctionRun run{t_max + 1, false, 1};
  for (int t = 1; t <= t_max; ++t) {
    state = step_fragments(state, kind, w, rng);
    run.peak_fragments = std::max(run.peak_fragments, state.fragments.size());
    if (state.dead()) {
      run.extinction_time = t;
      return run;
    }
    if (state.fragments.size() > guard) {
      run.guard_exceeded = true;
      return run;
    }
  }
  return run;
}

inline ExtinctionRun run_fragmentation(int n, const InteractionMatrix &J, int t_max, Rng &rng,
                                       std::size_t guard = kDefaultFragmentGuard) {
  return run_process(ProcessKind::fragmentation, n, GraphWeights(J), t_max, rng, guard);
}

inline ExtinctionRun run_coupon_noise(int n, const InteractionMatrix &J, int t_max, Rng &rng,
                                      std::size_t guard = kDefaultFragmentGuard) {
  return run_process(ProcessKind::coupon, n, GraphWeights(J), t_max, rng, guard);
}

// ---------------------------------------------------------------------------
// Branching

/// Connected component of x in G ~ nu_J, revealed by breadth-first search.
/// Empty when x is isolated, otherwise of size >= 2.
inline SiteSet component_sample(int x, const GraphWeights &w, Rng &rng) {
  const int n = w.sites();
  require(x >= 0 && x < n, "site out of range");
  SiteSet found = SiteSet::single(x);
  std::vector<int> queue{x};
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const int v = queue[head];
    for (int u = 0; u < n; ++u)
      if (!found.contains(u) && uniform01(rng) < w.p(v, u)) {
        found.insert(u);
        queue.push_back(u);
      }
  }
  return found.size() >= 2 ? found : SiteSet{};
}

inline SiteSet component_sample(int x, const InteractionMatrix &J, Rng &rng) {
  return component_sample(x, GraphWeights(J), rng);
}

/// Neighbourhood of x in G ~ nu_J.
inline SiteSet neighbour_sample(int x, const GraphWeights &w, Rng &rng) {
  SiteSet out;
  for (int y = 0; y < w.sites(); ++y)
    if (y != x && uniform01(rng) < w.p(x, y))
      out.insert(y);
  return out;
}

/// Offspring of an individual labeled x: its component if nonempty,
/// otherwise the empty set or {x} by a fair coin.
inline SiteSet offspring_sample(int x, const GraphWeights &w, Rng &rng) {
  const SiteSet u = component_sample(x, w, rng);
  if (!u.empty())
    return u;
  return fair_coin(rng) ? SiteSet::single(x) : SiteSet{};
}

inline SiteSet offspring_sample(int x, const InteractionMatrix &J, Rng &rng) {
  return offspring_sample(x, GraphWeights(J), rng);
}

struct BranchingRun {
  std::vector<std::size_t> generation_sizes; // |X_0|, ..., |X_{t-1}|
  std::size_t total = 1;                     // N(t)
  bool guard_exceeded = false;
};

/// Labeled branching from X_0 = {y}. N(t) sums the generation sizes
/// |X_0| + ... + |X_{t-1}|; N(0) = 1 by convention.
inline BranchingRun run_labeled_branching(int y, const GraphWeights &w, int t, Rng &rng,
                                          std::size_t guard = kDefaultFragmentGuard) {
  require(y >= 0 && y < w.sites(), "site out of range");
  require(t >= 0, "generation count must be nonnegative");
  BranchingRun run;
  if (t == 0)
    return run;
  run.total = 0;
  std::vector<int> generation{y};
  for (int l = 0; l < t; ++l) {
    run.generation_sizes.push_back(generation.size());
    run.total += generation.size();
    if (run.total > guard) {
      run.guard_exceeded = true;
      run.generation_sizes.resize(t, 0);
      return run;
    }
    if (l + 1 == t)
      break;
    std::vector<int> next;
    for (int x : generation)
      for (int z : offspring_sample(x, w, rng).sites())
        next.push_back(z);
    generation = std::move(next);
  }
  return run;
}

inline BranchingRun run_labeled_branching(int y, const InteractionMatrix &J, int t, Rng &rng,
                                          std::size_t guard = kDefaultFragmentGuard) {
  return run_labeled_branching(y, GraphWeights(J), t, rng, guard);
}

// ---------------------------------------------------------------------------
// Extinction estimates

struct ProcessSpec {
  ProcessKind kind = ProcessKind::fragmentation;
  InteractionMatrix J;
  std::size_t guard = kDefaultFragmentGuard;
};

struct ExtinctionPoint {
  int t = 0;
  std::size_t trials = 0;
  std::size_t alive = 0;
  double p_hat = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double bound = std::numeric_limits<double>::quiet_NaN();
};

struct ExtinctionEstimate {
  std::vector<ExtinctionPoint> points;
  std::size_t guard_hits = 0;
};

/// Union bounds for the non-interacting processes: n(n-1) 2^{-t} for
/// fragmentation, n e^{-t/(2n)} for the coupon process.
inline double zero_coupling_bound(ProcessKind kind, int n, int t) {
  if (kind == ProcessKind::fragmentation)
    return n * (n - 1.0) * std::ldexp(1.0, -t);
  return n * std::exp(-t / (2.0 * n));
}

/// P(alive at t) for each t in the grid from independent runs; run i uses
/// seed derive_seed(master_seed, i).
inline ExtinctionEstimate estimate_extinction(const ProcessSpec &spec, const std::vector<int> &t_grid,
                                              std::size_t trials, std::uint64_t master_seed, unsigned threads = 0) {
  require(trials >= 100, "extinction estimates need at least 100 trials");
  require(!t_grid.empty(), "t grid is empty");
  for (std::size_t i = 0; i < t_grid.size(); ++i)
    require(t_grid[i] >= 0 && (i == 0 || t_grid[i] > t_grid[i - 1]), "t grid must be strictly increasing");
  const int n = spec.J.sites();
  const GraphWeights w(spec.J);
  const int t_max = t_grid.back();

  std::vector<ExtinctionRun> runs(trials);
  parallel_for(
      trials,
      [&](std::size_t i) {
        Rng rng(derive_seed(master_seed, i));
        runs[i] = run_process(spec.kind, n, w, t_max, rng, spec.guard);
      },
      threads);

  ExtinctionEstimate est;
  for (const auto &r : runs)
    est.guard_hits += r.guard_exceeded;
  const bool zero = spec.J.is_zero();
  for (int t : t_grid) {
    ExtinctionPoint pt;
    pt.t = t;
    pt.trials = trials;
    for (const auto &r : runs)
      pt.alive += r.extinction_time > t;
    pt.p_hat = static_cast<double>(pt.alive) / trials;
    const Interval ci = wilson_interval(pt.alive, trials);
    pt.ci_lo = ci.lo;
    pt.ci_hi = ci.hi;
    if (zero && t >= 1)
      pt.bound = zero_coupling_bound(spec.kind, n, t);
    est.points.push_back(pt);
  }
  return est;
}

/// `t,trials,alive_count,p_hat,ci_lo,ci_hi,bound`; the bound column is empty
/// when no analytic bound applies.
inline void write_extinction_csv(std::ostream &out, const std::vector<ExtinctionPoint> &points) {
  out << "t,trials,alive_count,p_hat,ci_lo,ci_hi,bound\n";
  for (const auto &p : points)
    out << p.t << ',' << p.trials << ',' << p.alive << ',' << format_number(p.p_hat) << ','
        << format_number(p.ci_lo) << ',' << format_number(p.ci_hi) << ',' << format_number(p.bound) << '\n';
}

} // namespace nonlinspin
