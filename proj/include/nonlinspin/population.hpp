#pragma once

// Finite populations colliding in random pairs (the Kac model), and exact
// single-sample derivation-tree samplers for both dynamics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "nonlinspin/common.hpp"
#include "nonlinspin/distribution.hpp"
#include "nonlinspin/ising.hpp"
#include "nonlinspin/kernels.hpp"
#include "nonlinspin/stats.hpp"

namespace nonlinspin {

/// Law of the initial configuration; every kind supports exact sampling.
class InitialLaw {
public:
  enum class Kind { uniform, product, point, dense };

  static InitialLaw uniform(int n) {
    check_site_count(n);
    InitialLaw law(Kind::uniform, n);
    law.plus_.assign(n, 0.5);
    return law;
  }

  static InitialLaw product(std::vector<double> plus) {
    const int n = static_cast<int>(plus.size());
    check_site_count(n);
    for (double m : plus)
      require(m >= 0.0 && m <= 1.0, "product marginals must lie in [0,1]");
    InitialLaw law(Kind::product, n);
    law.plus_ = std::move(plus);
    return law;
  }

  static InitialLaw point(int n, SpinConfig sigma) {
    check_site_count(n);
    require((sigma.bits & ~SiteSet::full(n).mask) == 0, "point mass outside configuration space");
    InitialLaw law(Kind::point, n);
    law.point_ = sigma;
    return law;
  }

  /// Renormalises `p`; all entries must be non-negative with positive total.
  static InitialLaw dense(const DenseDistribution &p) {
    InitialLaw law(Kind::dense, p.sites());
    double total = 0.0;
    for (double v : p.probs()) {
      require(v >= 0.0, "dense law has a negative entry");
      total += v;
    }
    require(total > 0.0, "dense law has zero mass");
    law.cdf_.reserve(p.size());
    double acc = 0.0;
    for (double v : p.probs())
      law.cdf_.push_back(acc += v / total);
    law.cdf_.back() = 1.0;
    return law;
  }

  Kind kind() const { return kind_; }
  int sites() const { return n_; }

  SpinConfig sample(Rng &rng) const {
    switch (kind_) {
    case Kind::uniform:
      return {rng() & SiteSet::full(n_).mask};
    case Kind::product: {
      SpinConfig s;
      for (int x = 0; x < n_; ++x)
        if (uniform01(rng) < plus_[x])
          s.bits |= std::uint64_t{1} << x;
      return s;
    }
    case Kind::point:
      return point_;
    case Kind::dense:
      break;
    }
    const double u = uniform01(rng);
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return {static_cast<std::uint64_t>(std::min<std::ptrdiff_t>(it - cdf_.begin(), cdf_.size() - 1))};
  }

  DenseDistribution distribution() const {
    require(n_ <= default_caps().exact, "initial law too large for a dense vector");
    switch (kind_) {
    case Kind::uniform:
    case Kind::product:
      return DenseDistribution::product(plus_);
    case Kind::point:
      return DenseDistribution::point(n_, point_);
    case Kind::dense:
      break;
    }
    std::vector<double> p(cdf_.size());
    double prev = 0.0;
    for (std::size_t s = 0; s < p.size(); ++s) {
      p[s] = cdf_[s] - prev;
      prev = cdf_[s];
    }
    return {n_, std::move(p)};
  }

  /// P(sigma_x = +1) for each site.
  std::vector<double> marginals() const {
    if (kind_ == Kind::point) {
      std::vector<double> m(n_);
      for (int x = 0; x < n_; ++x)
        m[x] = point_.spin(x) > 0 ? 1.0 : 0.0;
      return m;
    }
    if (kind_ == Kind::dense)
      return nonlinspin::marginals(distribution());
    return plus_;
  }

private:
  InitialLaw(Kind kind, int n) : kind_(kind), n_(n) {}

  Kind kind_;
  int n_;
  std::vector<double> plus_;
  SpinConfig point_;
  std::vector<double> cdf_;
};

namespace detail {

/// Decimal or 0x-prefixed hex; signs and trailing characters are rejected.
inline std::uint64_t parse_unsigned(const std::string &token) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  if (!token.empty() && token[0] != '-' && token[0] != '+') {
    try {
      v = std::stoull(token, &used, 0);
    } catch (const std::exception &) {
      used = 0;
    }
  }
  require(used == token.size() && used > 0, "expected an unsigned integer, got '" + token + "'");
  return v;
}

} // namespace detail

/// Dense law with Dirichlet(1, ..., 1) weights; a generic correlated start.
inline DenseDistribution random_dense_law(int n, std::uint64_t seed) {
  check_site_count(n);
  require(n <= default_caps().exact, "random dense law exceeds the exact cap");
  Rng rng(seed);
  std::exponential_distribution<double> e(1.0);
  std::vector<double> w(std::size_t{1} << n);
  double total = 0.0;
  for (double &v : w)
    total += v = e(rng);
  for (double &v : w)
    v /= total;
  return {n, std::move(w)};
}

/// `uniform`, `product m_0 ... m_{n-1}`, `point <mask>` (decimal or 0x hex),
/// `random <seed>` (see random_dense_law) or `file <path>` (a distribution
/// file).
inline InitialLaw parse_initial_law(const std::string &spec, int n) {
  std::istringstream in(spec);
  std::string kind;
  require(static_cast<bool>(in >> kind), "empty initial-law spec");
  auto no_trailing = [&] {
    std::string extra;
    require(!(in >> extra), "trailing tokens in initial-law spec '" + spec + "'");
  };
  if (kind == "uniform") {
    no_trailing();
    return InitialLaw::uniform(n);
  }
  if (kind == "product") {
    std::vector<double> plus;
    double m = 0.0;
    while (in >> m)
      plus.push_back(m);
    require(in.eof(), "bad number in product spec '" + spec + "'");
    require(static_cast<int>(plus.size()) == n, "product spec needs one marginal per site");
    return InitialLaw::product(std::move(plus));
  }
  if (kind == "point") {
    std::string token;
    require(static_cast<bool>(in >> token), "point spec needs a mask");
    no_trailing();
    return InitialLaw::point(n, SpinConfig{detail::parse_unsigned(token)});
  }
  if (kind == "random") {
    std::string token;
    require(static_cast<bool>(in >> token), "random spec needs a seed");
    no_trailing();
    return InitialLaw::dense(random_dense_law(n, detail::parse_unsigned(token)));
  }
  if (kind == "file") {
    std::string path;
    require(static_cast<bool>(in >> path), "file spec needs a path");
    no_trailing();
    return InitialLaw::dense(load_distribution(path, n));
  }
  throw InvalidArgument("unknown initial-law kind '" + kind + "'");
}

struct Population {
  int n = 0;
  std::vector<SpinConfig> members;

  std::size_t size() const { return members.size(); }
};

inline void check_population(const Population &pop) {
  require(pop.size() >= 2 && pop.size() % 2 == 0, "population size must be even and at least 2");
}

inline Population sample_population(const InitialLaw &law, std::size_t N, Rng &rng) {
  Population pop{law.sites(), {}};
  pop.members.reserve(N);
  for (std::size_t i = 0; i < N; ++i)
    pop.members.push_back(law.sample(rng));
  check_population(pop);
  return pop;
}

/// Number of members with sigma_x = +1, per site.
inline std::vector<std::int64_t> site_counts(const Population &pop) {
  std::vector<std::int64_t> counts(pop.n, 0);
  for (SpinConfig s : pop.members)
    for (int x = 0; x < pop.n; ++x)
      counts[x] += (s.bits >> x) & 1U;
  return counts;
}

/// One synchronous round: a uniform random perfect matching, each pair
/// collides once and both outputs replace the pair.
inline Population kac_step(const Population &pop, Dynamics kind, const InteractionMatrix &J, Rng &rng,
                           const ExchangeOptions &opt = {}) {
  check_population(pop);
  require(J.sites() == pop.n, "population and couplings differ in size");
  Population next = pop;
  std::shuffle(next.members.begin(), next.members.end(), rng);
  for (std::size_t i = 0; i < next.size(); i += 2) {
    const auto [a, b] = collide_pair(kind, next.members[i], next.members[i + 1], J, rng, opt);
    next.members[i] = a;
    next.members[i + 1] = b;
  }
  return next;
}

/// Largest n for which run_population records the empirical dense law.
inline constexpr int kEmpiricalLawCap = 10;

struct PopulationStats {
  int t = 0;
  std::vector<std::int64_t> counts;  // members with sigma_x = +1
  std::vector<double> marginals;     // counts / N
  std::vector<double> correlations;  // n x n, Cov(sigma_x, sigma_y) in spin units
  std::vector<double> empirical;     // 2^n frequencies, empty if n > kEmpiricalLawCap
};

inline PopulationStats population_stats(const Population &pop, int t) {
  const int n = pop.n;
  const double N = static_cast<double>(pop.size());
  PopulationStats st;
  st.t = t;
  st.counts = site_counts(pop);
  st.marginals.resize(n);
  std::vector<double> mean(n);
  for (int x = 0; x < n; ++x) {
    st.marginals[x] = st.counts[x] / N;
    mean[x] = 2.0 * st.marginals[x] - 1.0;
  }
  std::vector<std::int64_t> agree(static_cast<std::size_t>(n) * n, 0);
  for (SpinConfig s : pop.members)
    for (int x = 0; x < n; ++x)
      for (int y = x; y < n; ++y)
        agree[x * n + y] += s.spin(x) * s.spin(y);
  st.correlations.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int x = 0; x < n; ++x)
    for (int y = x; y < n; ++y)
      st.correlations[x * n + y] = st.correlations[y * n + x] = agree[x * n + y] / N - mean[x] * mean[y];
  if (n <= kEmpiricalLawCap) {
    st.empirical.assign(std::size_t{1} << n, 0.0);
    for (SpinConfig s : pop.members)
      st.empirical[s.bits] += 1.0 / N;
  }
  return st;
}

struct PopulationRun {
  std::vector<PopulationStats> trajectory;  // t = 0..t_max
  Population final;
};

inline PopulationRun run_population(const InitialLaw &law, std::size_t N, Dynamics kind,
                                    const InteractionMatrix &J, int t_max, Rng &rng,
                                    const ExchangeOptions &opt = {}) {
  require(t_max >= 0, "negative step count");
  require(J.sites() == law.sites(), "initial law and couplings differ in size");
  PopulationRun run{{}, sample_population(law, N, rng)};
  run.trajectory.push_back(population_stats(run.final, 0));
  for (int t = 1; t <= t_max; ++t) {
    run.final = kac_step(run.final, kind, J, rng, opt);
    run.trajectory.push_back(population_stats(run.final, t));
  }
  return run;
}

/// `t,site,marginal,corr_0,...,corr_{n-1}`.
inline void write_population_csv(std::ostream &out, const std::vector<PopulationStats> &trajectory) {
  if (trajectory.empty())
    return;
  const int n = static_cast<int>(trajectory.front().marginals.size());
  out << "t,site,marginal";
  for (int y = 0; y < n; ++y)
    out << ",corr_" << y;
  out << '\n';
  for (const auto &st : trajectory)
    for (int x = 0; x < n; ++x) {
      out << st.t << ',' << x << ',' << format_number(st.marginals[x]);
      for (int y = 0; y < n; ++y)
        out << ',' << format_number(st.correlations[x * n + y]);
      out << '\n';
    }
}

/// One sample per line as 0x-prefixed hex.
inline void write_samples_hex(std::ostream &out, const std::vector<SpinConfig> &samples) {
  for (SpinConfig s : samples) {
    std::ostringstream hex;
    hex << "0x" << std::hex << s.bits;
    out << hex.str() << '\n';
  }
}

inline DenseDistribution empirical_distribution(int n, const std::vector<SpinConfig> &samples) {
  require(!samples.empty(), "no samples");
  require(n <= default_caps().exact, "too many sites for an empirical dense law");
  std::vector<double> p(std::size_t{1} << n, 0.0);
  const double w = 1.0 / static_cast<double>(samples.size());
  for (SpinConfig s : samples)
    p[s.bits] += w;
  return {n, std::move(p)};
}

namespace detail {

inline SpinConfig block_tree(const InitialLaw &law, const InteractionMatrix &J, int depth, Rng &rng,
                             const ExchangeOptions &opt) {
  if (depth == 0)
    return law.sample(rng);
  const SpinConfig a = block_tree(law, J, depth - 1, rng, opt);
  const SpinConfig b = block_tree(law, J, depth - 1, rng, opt);
  return block_collide_pair(a, b, J, rng, opt).first;
}

inline SpinConfig glauber_tree(const InitialLaw &law, const InteractionMatrix &J, int depth, Rng &rng) {
  if (depth == 0)
    return law.sample(rng);
  const SpinConfig a = glauber_tree(law, J, depth - 1, rng);
  const SpinConfig b = glauber_tree(law, J, depth - 1, rng);
  return glauber_collide_pair(a, b, J, rng).first;
}

inline void check_tree_depth(int t, const Caps &caps) {
  require(t >= 0, "negative tree depth");
  if (t > caps.tree_depth)
    throw CapExceeded("tree depth " + std::to_string(t) + " exceeds cap " + std::to_string(caps.tree_depth));
}

} // namespace detail

/// Root of a full derivation tree of depth t with law at the 2^t leaves;
/// distributed as t steps of the block dynamics from the law.
inline SpinConfig tree_sample_block(const InitialLaw &law, const InteractionMatrix &J, int t, Rng &rng,
                                    const Caps &caps = default_caps()) {
  require(J.sites() == law.sites(), "initial law and couplings differ in size");
  detail::check_tree_depth(t, caps);
  ExchangeOptions opt;
  opt.cap = caps.exchange;
  return detail::block_tree(law, J, t, rng, opt);
}

/// Full 2^t-leaf Glauber tree. Exponential cost; kept as the reference for
/// the lazy sampler.
inline SpinConfig tree_sample_glauber_naive(const InitialLaw &law, const InteractionMatrix &J, int t, Rng &rng,
                                            const Caps &caps = default_caps()) {
  require(J.sites() == law.sites(), "initial law and couplings differ in size");
  detail::check_tree_depth(t, caps);
  return detail::glauber_tree(law, J, t, rng);
}

inline constexpr std::size_t kDefaultWorkGuard = 10'000'000;

struct LazySample {
  SpinConfig sample;
  std::size_t nodes = 0;  // resolved tree nodes, leaves included
  bool guard_exceeded = false;
};

namespace detail {

struct WorkGuardHit {};

class LazyGlauber {
public:
  LazyGlauber(const InitialLaw &law, const InteractionMatrix &J, Rng &rng, std::size_t guard)
      : law_(law), rng_(rng), guard_(guard), n_(J.sites()), J_(J) {
    for (int x = 0; x < n_; ++x) {
      star_.push_back(J.neighbours(x) | SiteSet::single(x));
      double r = 0.0;
      for (int y = 0; y < n_; ++y)
        r += y == x ? 0.0 : std::abs(J(x, y));
      // alpha_x lies in [lo, 1 - lo] whatever the neighbouring spins are
      alpha_lo_.push_back(1.0 / (1.0 + std::exp(4.0 * r)));
    }
  }

  // Output of the node at `depth` on the sites in `need`; other bits are
  // unspecified.
  SpinConfig resolve(int depth, SiteSet need) {
    if (need.empty())
      return {};
    int x = 0;
    for (;;) {
      touch();
      if (depth == 0)
        return law_.sample(rng_);
      x = uniform_site(n_, rng_);
      --depth;
      if (need.contains(x))
        break;
      // the collision only moves site x, so the left input already agrees on need
    }
    // The swap happens iff u < alpha_x. Outside [lo, 1 - lo] the answer is
    // known before the neighbours are read, and only one input matters at x.
    const double u = uniform01(rng_);
    const SiteSet at_x = SiteSet::single(x);
    if (u < alpha_lo_[x]) {
      const SpinConfig left = resolve(depth, need.minus(at_x));
      const SpinConfig right = resolve(depth, at_x);
      return splice(right, left, at_x);
    }
    if (u >= 1.0 - alpha_lo_[x])
      return resolve(depth, need);
    const SpinConfig left = resolve(depth, need | star_[x]);
    const SpinConfig right = resolve(depth, star_[x]);
    return u < alpha(x, left, right, J_) ? splice(right, left, at_x) : left;
  }

  std::size_t nodes() const { return nodes_; }

private:
  void touch() {
    if (++nodes_ > guard_)
      throw WorkGuardHit{};
  }

  const InitialLaw &law_;
  Rng &rng_;
  std::size_t guard_;
  std::size_t nodes_ = 0;
  int n_;
  const InteractionMatrix &J_;
  std::vector<SiteSet> star_;
  std::vector<double> alpha_lo_;
};

} // namespace detail

/// One sample of t Glauber steps from the law, resolving only the tree
/// nodes whose output can reach the root.
inline LazySample tree_sample_glauber_lazy(const InitialLaw &law, const InteractionMatrix &J, int t, Rng &rng,
                                           std::size_t guard = kDefaultWorkGuard) {
  require(J.sites() == law.sites(), "initial law and couplings differ in size");
  require(t >= 0, "negative tree depth");
  detail::LazyGlauber tree(law, J, rng, guard);
  LazySample out;
  try {
    out.sample = tree.resolve(t, SiteSet::full(law.sites()));
    out.sample.bits &= SiteSet::full(law.sites()).mask;
  } catch (const detail::WorkGuardHit &) {
    out.guard_exceeded = true;
  }
  out.nodes = tree.nodes();
  return out;
}

enum class TreeSampler { block, glauber_lazy, glauber_naive };

struct TreeBatch {
  std::vector<SpinConfig> samples;
  std::vector<std::size_t> nodes;  // lazy sampler only
  std::size_t guard_hits = 0;

  double mean_nodes() const {
    double m = 0.0;
    for (std::size_t v : nodes)
      m += static_cast<double>(v) / nodes.size();
    return m;
  }
};

/// `count` independent samples; sample i uses seed derive_seed(master_seed, i).
/// Samples that hit the work guard are dropped and counted.
inline TreeBatch sample_tree_batch(TreeSampler sampler, const InitialLaw &law, const InteractionMatrix &J, int t,
                                   std::size_t count, std::uint64_t master_seed, unsigned threads = 0,
                                   std::size_t guard = kDefaultWorkGuard, const Caps &caps = default_caps()) {
  std::vector<LazySample> raw(count);
  parallel_for(
      count,
      [&](std::size_t i) {
        Rng rng(derive_seed(master_seed, i));
        switch (sampler) {
        case TreeSampler::block:
          raw[i].sample = tree_sample_block(law, J, t, rng, caps);
          break;
        case TreeSampler::glauber_naive:
          raw[i].sample = tree_sample_glauber_naive(law, J, t, rng, caps);
          break;
        case TreeSampler::glauber_lazy:
          raw[i] = tree_sample_glauber_lazy(law, J, t, rng, guard);
          break;
        }
      },
      threads);
  TreeBatch batch;
  for (const auto &r : raw) {
    if (sampler == TreeSampler::glauber_lazy)
      batch.nodes.push_back(r.nodes);
    if (r.guard_exceeded)
      ++batch.guard_hits;
    else
      batch.samples.push_back(r.sample);
  }
  return batch;
}

} // namespace nonlinspin
