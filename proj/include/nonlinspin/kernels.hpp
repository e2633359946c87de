#pragma once

// Collision kernels of the nonlinear block and Glauber dynamics.
//
// Block collision of (sigma, sigma'): draw an exchange set L with probability
// gamma(L) proportional to mu(sigma_L sigma'_Lc) mu(sigma'_L sigma_Lc) (h = 0)
// and output (sigma_L sigma'_Lc, sigma'_L sigma_Lc).  Restricted to the
// disagreement set D, gamma is the Ising measure with couplings
// 2 J_xy sigma_x sigma_y; off D the membership of L is a fair coin.
//
// Glauber collision: pick x uniformly and exchange the spins at x with
// probability alpha_x(sigma, sigma').

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "nonlinspin/common.hpp"
#include "nonlinspin/ising.hpp"

namespace nonlinspin {

enum class Dynamics { block, glauber };

inline std::string to_string(Dynamics kind) {
  return kind == Dynamics::block ? "block" : "glauber";
}

inline Dynamics parse_dynamics(const std::string &s) {
  if (s == "block")
    return Dynamics::block;
  if (s == "glauber")
    return Dynamics::glauber;
  throw InvalidArgument("unknown dynamics '" + s + "' (expected block or glauber)");
}

struct ExchangeSet {
  SiteSet lambda;
  friend bool operator==(ExchangeSet, ExchangeSet) = default;
};

/// Sites where the two configurations differ.
inline SiteSet disagreement_set(SpinConfig sigma, SpinConfig sigma_prime) {
  return SiteSet{sigma.bits ^ sigma_prime.bits};
}

/// J~_xy = 2 J_xy s_x s_y on D x D, zero elsewhere.
struct TiltedInteraction {
  SiteSet disagreement;
  InteractionMatrix entries;
};

inline TiltedInteraction tilted_interaction(SpinConfig sigma, SpinConfig sigma_prime,
                                            const InteractionMatrix &J) {
  const SiteSet d = disagreement_set(sigma, sigma_prime);
  InteractionMatrix tilted(J.sites());
  for (int x : d.sites())
    for (int y : d.sites())
      if (x < y)
        tilted.set(x, y, 2.0 * J(x, y) * sigma.spin(x) * sigma.spin(y));
  return {d, std::move(tilted)};
}

/// log of mu(sigma_L sigma'_Lc) mu(sigma'_L sigma_Lc), unnormalised, h = 0.
inline double gamma_log_weight(ExchangeSet lambda, SpinConfig sigma, SpinConfig sigma_prime,
                               const InteractionMatrix &J) {
  const SpinConfig tau = splice(sigma, sigma_prime, lambda.lambda);
  const SpinConfig tau_prime = splice(sigma_prime, sigma, lambda.lambda);
  return energy(tau, J) + energy(tau_prime, J);
}

inline double gamma_weight(ExchangeSet lambda, SpinConfig sigma, SpinConfig sigma_prime,
                           const InteractionMatrix &J) {
  return std::exp(gamma_log_weight(lambda, sigma, sigma_prime, J));
}

/// Law of L restricted to the disagreement set D. Entry i is the probability
/// that L intersected with D equals deposit(i), where deposit spreads the k
/// bits of i over the sites of D in increasing order.
struct ExchangeLaw {
  SiteSet disagreement;
  std::vector<int> sites;      // sites of D, increasing
  std::vector<double> probs;   // length 2^|D|

  SiteSet deposit(std::uint64_t pattern) const {
    SiteSet out;
    for (std::size_t i = 0; i < sites.size(); ++i)
      if ((pattern >> i) & 1U)
        out.insert(sites[i]);
    return out;
  }
};

namespace detail {

/// Log weights over the 2^k patterns of an Ising measure on `sites` with
/// couplings coupling(a, b) between the a-th and b-th site (ordered-pair
/// sum convention: weight = sum_{a<b} c_ab e_a e_b), Gray-code enumeration.
template <class Coupling>
std::vector<double> pattern_log_weights(int k, Coupling &&coupling) {
  const std::size_t count = std::size_t{1} << k;
  std::vector<double> logw(count);
  std::vector<double> local(k, 0.0);
  double e = 0.0;
  // all-minus start
  for (int a = 0; a < k; ++a)
    for (int b = a + 1; b < k; ++b)
      e += coupling(a, b);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b)
      if (a != b)
        local[a] -= coupling(std::min(a, b), std::max(a, b));
  std::uint64_t state = 0;
  logw[0] = e;
  for (std::uint64_t g = 1; g < count; ++g) {
    const int a = std::countr_zero(g);
    const int sa = ((state >> a) & 1U) ? 1 : -1;
    e -= 2.0 * sa * local[a];
    state ^= std::uint64_t{1} << a;
    for (int b = 0; b < k; ++b)
      if (b != a)
        local[b] -= 2.0 * sa * coupling(std::min(a, b), std::max(a, b));
    logw[state] = e;
  }
  return logw;
}

inline void normalise_log_weights(std::vector<double> &w) {
  const double lz = log_sum_exp(w);
  for (double &v : w)
    v = std::exp(v - lz);
}

} // namespace detail

/// Exact law of L on D via the tilted Ising measure (pattern bit set = site in L).
inline ExchangeLaw exchange_law(SpinConfig sigma, SpinConfig sigma_prime, const InteractionMatrix &J,
                                int exchange_cap = default_caps().exchange) {
  ExchangeLaw law;
  law.disagreement = disagreement_set(sigma, sigma_prime);
  law.sites = law.disagreement.sites();
  const int k = static_cast<int>(law.sites.size());
  if (k > exchange_cap)
    throw CapExceeded("disagreement set of size " + std::to_string(k) + " exceeds exchange cap " +
                      std::to_string(exchange_cap));
  const auto &s = law.sites;
  law.probs = detail::pattern_log_weights(k, [&](int a, int b) {
    return 2.0 * J(s[a], s[b]) * sigma.spin(s[a]) * sigma.spin(s[b]);
  });
  detail::normalise_log_weights(law.probs);
  return law;
}

/// gamma over all 2^n subsets, bitmask-indexed. Built from the factored form
/// (fair coins off D times the tilted law on D).
inline std::vector<double> gamma_distribution(SpinConfig sigma, SpinConfig sigma_prime,
                                              const InteractionMatrix &J,
                                              int exact_cap = default_caps().exact) {
  const int n = J.sites();
  if (n > exact_cap)
    throw CapExceeded("gamma table on " + std::to_string(n) + " sites exceeds exact cap");
  const ExchangeLaw law = exchange_law(sigma, sigma_prime, J, n);
  const int free_sites = n - static_cast<int>(law.sites.size());
  const double coin = std::ldexp(1.0, -free_sites);
  std::vector<double> out(std::size_t{1} << n);
  for (std::size_t lambda = 0; lambda < out.size(); ++lambda) {
    std::uint64_t pattern = 0;
    for (std::size_t i = 0; i < law.sites.size(); ++i)
      if ((lambda >> law.sites[i]) & 1U)
        pattern |= std::uint64_t{1} << i;
    out[lambda] = coin * law.probs[pattern];
  }
  return out;
}

struct ExchangeOptions {
  int cap = default_caps().exchange;
  /// Above the cap, fall back to heat-bath sweeps on the tilted measure.
  /// The result is then approximate.
  bool allow_approximate = false;
  int sweeps_per_site = 100;
};

namespace detail {

inline std::uint64_t sample_pattern(const std::vector<double> &probs, Rng &rng) {
  double u = uniform01(rng);
  for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
    u -= probs[i];
    if (u < 0.0)
      return i;
  }
  return probs.size() - 1;
}

inline SiteSet heat_bath_exchange(SpinConfig sigma, SiteSet d, const InteractionMatrix &J, int sweeps,
                                  Rng &rng) {
  const std::vector<int> sites = d.sites();
  // xi_x = sigma_x eta_x follows Ising(2J) on D; start from fair coins
  SiteSet eta;
  for (int x : sites)
    if (fair_coin(rng))
      eta.insert(x);
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    for (int x : sites) {
      double field = 0.0;
      for (int y : sites)
        if (y != x)
          field += 2.0 * J(x, y) * sigma.spin(x) * sigma.spin(y) * (eta.contains(y) ? 1.0 : -1.0);
      const double p_plus = 1.0 / (1.0 + std::exp(-2.0 * field));
      if (uniform01(rng) < p_plus)
        eta.insert(x);
      else
        eta.erase(x);
    }
  }
  return eta;
}

} // namespace detail

inline ExchangeSet sample_exchange_set(const ExchangeLaw &law, int n, Rng &rng) {
  SiteSet lambda = law.deposit(detail::sample_pattern(law.probs, rng));
  const SiteSet off = SiteSet::full(n).minus(law.disagreement);
  for (std::uint64_t m = off.mask; m != 0; m &= m - 1)
    if (fair_coin(rng))
      lambda.insert(std::countr_zero(m));
  return {lambda};
}

inline ExchangeSet sample_exchange_set(SpinConfig sigma, SpinConfig sigma_prime, const InteractionMatrix &J,
                                       Rng &rng, const ExchangeOptions &opt = {}) {
  const int n = J.sites();
  const SiteSet d = disagreement_set(sigma, sigma_prime);
  if (d.size() <= opt.cap)
    return sample_exchange_set(exchange_law(sigma, sigma_prime, J, opt.cap), n, rng);
  if (!opt.allow_approximate)
    throw CapExceeded("disagreement set of size " + std::to_string(d.size()) +
                      " exceeds exchange cap; approximate sampling not enabled");
  SiteSet lambda = detail::heat_bath_exchange(sigma, d, J, opt.sweeps_per_site * d.size(), rng);
  const SiteSet off = SiteSet::full(n).minus(d);
  for (std::uint64_t m = off.mask; m != 0; m &= m - 1)
    if (fair_coin(rng))
      lambda.insert(std::countr_zero(m));
  return {lambda};
}

/// Probability that a Glauber collision chosen at x exchanges the spins at x.
inline double alpha(int x, SpinConfig sigma, SpinConfig sigma_prime, const InteractionMatrix &J) {
  const int dx = sigma.spin(x) - sigma_prime.spin(x);
  if (dx == 0)
    return 0.5;
  double s = 0.0;
  for (int y = 0; y < J.sites(); ++y)
    if (y != x)
      s += J(x, y) * (sigma.spin(y) - sigma_prime.spin(y));
  return 1.0 / (1.0 + std::exp(dx * s));
}

using ConfigPair = std::pair<SpinConfig, SpinConfig>;

inline ConfigPair apply_exchange(SpinConfig sigma, SpinConfig sigma_prime, ExchangeSet lambda) {
  return {splice(sigma, sigma_prime, lambda.lambda), splice(sigma_prime, sigma, lambda.lambda)};
}

inline ConfigPair block_collide_pair(SpinConfig sigma, SpinConfig sigma_prime, const InteractionMatrix &J,
                                     Rng &rng, const ExchangeOptions &opt = {}) {
  if (sigma == sigma_prime)
    return {sigma, sigma};
  return apply_exchange(sigma, sigma_prime, sample_exchange_set(sigma, sigma_prime, J, rng, opt));
}

/// Exchange the spin at x between the two configurations.
inline ConfigPair swap_site(SpinConfig sigma, SpinConfig sigma_prime, int x) {
  const SiteSet keep = SiteSet::full(64).minus(SiteSet::single(x));
  return {splice(sigma, sigma_prime, keep), splice(sigma_prime, sigma, keep)};
}

inline ConfigPair glauber_collide_pair(SpinConfig sigma, SpinConfig sigma_prime, const InteractionMatrix &J,
                                       Rng &rng) {
  const int x = uniform_site(J.sites(), rng);
  const double a = alpha(x, sigma, sigma_prime, J);
  if (uniform01(rng) < a)
    return swap_site(sigma, sigma_prime, x);
  return {sigma, sigma_prime};
}

inline ConfigPair collide_pair(Dynamics kind, SpinConfig sigma, SpinConfig sigma_prime,
                               const InteractionMatrix &J, Rng &rng, const ExchangeOptions &opt = {}) {
  return kind == Dynamics::block ? block_collide_pair(sigma, sigma_prime, J, rng, opt)
                                 : glauber_collide_pair(sigma, sigma_prime, J, rng);
}

/// Q(s, s'; t, t') on the pair space, row (s, s') -> column (t, t'),
/// pair index s * 2^n + s'.
class KernelMatrix {
public:
  KernelMatrix(int n) : n_(n), states_(std::size_t{1} << n), q_(states_ * states_ * states_ * states_, 0.0) {}

  int sites() const { return n_; }
  std::size_t states() const { return states_; }
  std::size_t pair(std::uint64_t s, std::uint64_t sp) const { return s * states_ + sp; }
  std::size_t pairs() const { return states_ * states_; }

  double operator()(std::uint64_t s, std::uint64_t sp, std::uint64_t t, std::uint64_t tp) const {
    return q_[pair(s, sp) * pairs() + pair(t, tp)];
  }
  double &at(std::uint64_t s, std::uint64_t sp, std::uint64_t t, std::uint64_t tp) {
    return q_[pair(s, sp) * pairs() + pair(t, tp)];
  }

private:
  int n_;
  std::size_t states_;
  std::vector<double> q_;
};

inline constexpr int kKernelMatrixCap = 3;

inline KernelMatrix kernel_matrix(Dynamics kind, const InteractionMatrix &J) {
  const int n = J.sites();
  if (n > kKernelMatrixCap)
    throw CapExceeded("kernel_matrix is exhaustive and limited to n <= 3");
  KernelMatrix q(n);
  const std::uint64_t states = q.states();
  for (std::uint64_t s = 0; s < states; ++s) {
    for (std::uint64_t sp = 0; sp < states; ++sp) {
      const SpinConfig a{s}, b{sp};
      if (kind == Dynamics::block) {
        const auto g = gamma_distribution(a, b, J);
        for (std::uint64_t lambda = 0; lambda < states; ++lambda) {
          const auto [t, tp] = apply_exchange(a, b, ExchangeSet{SiteSet{lambda}});
          q.at(s, sp, t.bits, tp.bits) += g[lambda];
        }
      } else {
        for (int x = 0; x < n; ++x) {
          const double al = alpha(x, a, b, J);
          const auto [t, tp] = swap_site(a, b, x);
          q.at(s, sp, t.bits, tp.bits) += al / n;
          q.at(s, sp, s, sp) += (1.0 - al) / n;
        }
      }
    }
  }
  return q;
}

/// Worst-case residuals of the kernel axioms. Detailed balance is checked
/// against every measure in `mus`.
struct KernelAudit {
  double row_sum = 0.0;           // max |sum_{t,t'} Q(s,s';t,t') - 1|
  double symmetry = 0.0;          // max |Q(s,s';t,t') - Q(s',s;t',t)|
  double min_diagonal = 1.0;      // min Q(s,s';s,s')
  double detailed_balance = 0.0;  // max |mu mu Q - mu mu Q| over the reversed move

  double worst_residual() const { return std::max({row_sum, symmetry, detailed_balance}); }
};

inline KernelAudit audit_kernel(const KernelMatrix &q, const std::vector<DenseDistribution> &mus) {
  const std::uint64_t S = q.states();
  for (const auto &mu : mus)
    require(mu.size() == S, "audit measure has the wrong dimension");
  KernelAudit a;
  for (std::uint64_t s = 0; s < S; ++s)
    for (std::uint64_t sp = 0; sp < S; ++sp) {
      double row = 0.0;
      for (std::uint64_t t = 0; t < S; ++t)
        for (std::uint64_t tp = 0; tp < S; ++tp) {
          const double v = q(s, sp, t, tp);
          row += v;
          a.symmetry = std::max(a.symmetry, std::abs(v - q(sp, s, tp, t)));
          for (const auto &mu : mus)
            a.detailed_balance =
                std::max(a.detailed_balance, std::abs(mu[s] * mu[sp] * v - mu[t] * mu[tp] * q(t, tp, s, sp)));
        }
      a.row_sum = std::max(a.row_sum, std::abs(row - 1.0));
      a.min_diagonal = std::min(a.min_diagonal, q(s, sp, s, sp));
    }
  return a;
}

} // namespace nonlinspin
