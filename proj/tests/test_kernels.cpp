#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "nonlinspin/kernels.hpp"
#include "oracles.hpp"

using namespace nonlinspin;

namespace {

InteractionMatrix pair_coupling(double beta) {
  InteractionMatrix J(2);
  J.set(0, 1, beta);
  return J;
}

constexpr SpinConfig kPP{0b11}, kMM{0b00};

} // namespace

TEST(Disagreement, Examples) {
  EXPECT_TRUE(disagreement_set(SpinConfig{0b1010}, SpinConfig{0b1010}).empty());
  EXPECT_EQ(disagreement_set(SpinConfig{0b1111}, SpinConfig{0b0000}), SiteSet::full(4));
  // ++- vs +-- (site order 1,2,3 -> bits 0,1,2): differ at site 2 only
  EXPECT_EQ(disagreement_set(SpinConfig{0b011}, SpinConfig{0b001}), SiteSet::single(1));
}

TEST(TiltedInteraction, SupportedOnDisagreement) {
  Rng rng(4);
  const auto J = oracle::random_couplings(5, 0.5, rng);
  const SpinConfig s{0b10110}, sp{0b00111};
  const auto tilted = tilted_interaction(s, sp, J);
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 5; ++y) {
      EXPECT_EQ(tilted.entries(x, y), tilted.entries(y, x));
      if (!tilted.disagreement.contains(x) || !tilted.disagreement.contains(y) || x == y)
        EXPECT_EQ(tilted.entries(x, y), 0.0);
      else
        EXPECT_DOUBLE_EQ(tilted.entries(x, y), 2 * J(x, y) * s.spin(x) * s.spin(y));
    }
}

TEST(GammaWeight, ZeroCouplingIsFlat) {
  const InteractionMatrix J(3);
  for (std::uint64_t l = 0; l < 8; ++l)
    EXPECT_DOUBLE_EQ(gamma_weight(ExchangeSet{SiteSet{l}}, SpinConfig{0b101}, SpinConfig{0b010}, J), 1.0);
}

TEST(GammaWeight, BothExchangedKeepsAlignment) {
  const double b = 0.3;
  const auto J = pair_coupling(b);
  const double both = gamma_weight(ExchangeSet{SiteSet{0b11}}, kPP, kMM, J);
  const double one = gamma_weight(ExchangeSet{SiteSet{0b01}}, kPP, kMM, J);
  EXPECT_NEAR(both / one, std::exp(4 * b), 1e-12);
}

TEST(GammaWeight, ComplementHasEqualWeight) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 5;
    const auto J = oracle::random_couplings(n, 1.0, rng);
    const auto s = oracle::random_config(n, rng), sp = oracle::random_config(n, rng);
    const SiteSet l{rng() & 31};
    EXPECT_NEAR(gamma_log_weight({l}, s, sp, J), gamma_log_weight({SiteSet::full(n).minus(l)}, s, sp, J), 1e-12);
  }
}

TEST(GammaDistribution, Examples) {
  const auto uniform = gamma_distribution(SpinConfig{0b110}, SpinConfig{0b011}, InteractionMatrix(3));
  for (double g : uniform)
    EXPECT_NEAR(g, 1.0 / 8, 1e-15);

  const double b = 0.35;
  const auto g = gamma_distribution(kPP, kMM, pair_coupling(b));
  const double z = 2 * std::exp(2 * b) + 2 * std::exp(-2 * b);
  EXPECT_NEAR(g[0b11], std::exp(2 * b) / z, 1e-15);
  EXPECT_NEAR(g[0b00], std::exp(2 * b) / z, 1e-15);
  EXPECT_NEAR(g[0b01], std::exp(-2 * b) / z, 1e-15);
  EXPECT_NEAR(g[0b10], std::exp(-2 * b) / z, 1e-15);

  Rng rng(6);
  const auto J = oracle::random_couplings(4, 0.5, rng);
  for (double v : gamma_distribution(SpinConfig{0b1001}, SpinConfig{0b1001}, J))
    EXPECT_NEAR(v, 1.0 / 16, 1e-15);
}

TEST(GammaDistribution, MatchesDirectNormalisationAndIgnoresFields) {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 1 + trial % 7;
    const auto J = oracle::random_couplings(n, 1.5, rng);
    const auto s = oracle::random_config(n, rng), sp = oracle::random_config(n, rng);
    const auto g = gamma_distribution(s, sp, J);
    const auto direct = oracle::gamma(s, sp, J, FieldVector(n));
    const auto with_field = oracle::gamma(s, sp, J, oracle::random_fields(n, 2.0, rng));
    double total = 0.0;
    for (std::size_t l = 0; l < g.size(); ++l) {
      total += g[l];
      EXPECT_NEAR(g[l], direct[l], 1e-12);
      EXPECT_NEAR(g[l], with_field[l], 1e-12);
      EXPECT_NEAR(g[l], g[SiteSet::full(n).mask ^ l], 1e-15);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(GammaDistribution, DependsOnlyOnDisagreementAndSigmaThere) {
  Rng rng(8);
  const int n = 6;
  const auto J = oracle::random_couplings(n, 0.7, rng);
  for (int trial = 0; trial < 30; ++trial) {
    const auto s = oracle::random_config(n, rng), sp = oracle::random_config(n, rng);
    const SiteSet d = disagreement_set(s, sp);
    // rewrite the agreeing sites arbitrarily
    const std::uint64_t other = rng() & SiteSet::full(n).minus(d).mask;
    const SpinConfig s2{(s.bits & d.mask) | other};
    const SpinConfig sp2{(sp.bits & d.mask) | other};
    const auto a = gamma_distribution(s, sp, J);
    const auto b = gamma_distribution(s2, sp2, J);
    for (std::size_t l = 0; l < a.size(); ++l)
      EXPECT_NEAR(a[l], b[l], 1e-14);
  }
}

TEST(GammaDistribution, LargeCouplingsStayFinite) {
  const auto J = uniform_interaction(6, 400.0);
  const auto g = gamma_distribution(SpinConfig{0b111111}, SpinConfig{0}, J);
  double total = 0.0;
  for (double v : g) {
    EXPECT_TRUE(std::isfinite(v));
    total += v;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(SampleExchangeSet, ZeroCouplingUniformChiSquare) {
  Rng rng(9);
  const InteractionMatrix J(3);
  const int draws = 100000;
  std::vector<int> counts(8, 0);
  for (int i = 0; i < draws; ++i)
    ++counts[sample_exchange_set(SpinConfig{0b101}, SpinConfig{0b011}, J, rng).lambda.mask];
  double chi2 = 0.0;
  const double expect = draws / 8.0;
  for (int c : counts)
    chi2 += (c - expect) * (c - expect) / expect;
  // 7 degrees of freedom, 0.999 quantile 24.32
  EXPECT_LT(chi2, 24.32);
}

TEST(SampleExchangeSet, EqualConfigsGiveIndependentCoins) {
  Rng rng(10);
  const auto J = uniform_interaction(4, 0.8);
  const int draws = 100000;
  std::vector<int> inside(4, 0);
  for (int i = 0; i < draws; ++i) {
    const auto l = sample_exchange_set(SpinConfig{0b0110}, SpinConfig{0b0110}, J, rng).lambda;
    for (int x = 0; x < 4; ++x)
      inside[x] += l.contains(x);
  }
  for (int c : inside)
    EXPECT_NEAR(c / double(draws), 0.5, oracle::three_se(0.5, draws));
}

TEST(SampleExchangeSet, PairFrequencyMatchesBruteForce) {
  Rng rng(11);
  const auto J = pair_coupling(0.5);
  const int draws = 100000;
  int both = 0;
  for (int i = 0; i < draws; ++i)
    both += sample_exchange_set(kPP, kMM, J, rng).lambda.mask == 0b11;
  const double expect = std::exp(1.0) / (2 * std::exp(1.0) + 2 * std::exp(-1.0));
  EXPECT_NEAR(both / double(draws), expect, oracle::three_se(expect, draws));
}

TEST(SampleExchangeSet, CapAndApproximateFallback) {
  const auto J = uniform_interaction(6, 0.3);
  Rng rng(12);
  ExchangeOptions strict{.cap = 3};
  EXPECT_THROW(sample_exchange_set(SpinConfig{0b111111}, SpinConfig{0}, J, rng, strict), CapExceeded);

  // heat-bath fallback is close to the exact law on a small problem
  ExchangeOptions approx{.cap = 3, .allow_approximate = true, .sweeps_per_site = 20};
  const auto exact = gamma_distribution(SpinConfig{0b111111}, SpinConfig{0}, J);
  std::vector<double> freq(64, 0.0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i)
    freq[sample_exchange_set(SpinConfig{0b111111}, SpinConfig{0}, J, rng, approx).lambda.mask] += 1.0 / draws;
  double tv = 0.0;
  for (int l = 0; l < 64; ++l)
    tv += 0.5 * std::abs(freq[l] - exact[l]);
  EXPECT_LT(tv, 0.05);
}

TEST(Alpha, Examples) {
  Rng rng(13);
  const InteractionMatrix zero(4);
  for (int i = 0; i < 20; ++i)
    EXPECT_EQ(alpha(i % 4, oracle::random_config(4, rng), oracle::random_config(4, rng), zero), 0.5);
  const auto J = oracle::random_couplings(4, 0.6, rng);
  EXPECT_EQ(alpha(2, SpinConfig{0b0100}, SpinConfig{0b0111}, J), 0.5);
  const double b = 0.45;
  EXPECT_NEAR(alpha(0, kPP, kMM, pair_coupling(b)), 1.0 / (1.0 + std::exp(4 * b)), 1e-15);
}

TEST(Alpha, MatchesGibbsRatioAndIsSymmetric) {
  Rng rng(14);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 5;
    const auto J = oracle::random_couplings(n, 1.0, rng);
    const auto s = oracle::random_config(n, rng), sp = oracle::random_config(n, rng);
    const int x = trial % n;
    const double a = alpha(x, s, sp, J);
    EXPECT_GT(a, 0.0);
    EXPECT_LT(a, 1.0);
    EXPECT_NEAR(a, alpha(x, sp, s, J), 1e-15);
    EXPECT_NEAR(a, oracle::alpha(x, s, sp, J), 1e-12);
  }
}

TEST(BlockCollide, ConservesSiteMultisets) {
  Rng rng(15);
  const auto J = oracle::random_couplings(6, 0.5, rng);
  for (int i = 0; i < 2000; ++i) {
    const auto s = oracle::random_config(6, rng), sp = oracle::random_config(6, rng);
    const auto [t, tp] = block_collide_pair(s, sp, J, rng);
    // {t_x, t'_x} = {s_x, s'_x} at each site
    EXPECT_EQ(t.bits & tp.bits, s.bits & sp.bits);
    EXPECT_EQ(t.bits | tp.bits, s.bits | sp.bits);
    // output is in the equivalence class: complementary choice on D
    EXPECT_EQ(t.bits ^ tp.bits, s.bits ^ sp.bits);
  }
  const SpinConfig same{0b101010};
  const auto [a, b] = block_collide_pair(same, same, J, rng);
  EXPECT_EQ(a, same);
  EXPECT_EQ(b, same);
}

TEST(BlockCollide, ZeroCouplingSingleSiteKeepsWithHalfProbability) {
  Rng rng(16);
  const InteractionMatrix J(1);
  const int draws = 100000;
  int kept = 0;
  for (int i = 0; i < draws; ++i)
    kept += block_collide_pair(SpinConfig{1}, SpinConfig{0}, J, rng).first.bits == 1;
  EXPECT_NEAR(kept / double(draws), 0.5, oracle::three_se(0.5, draws));
}

TEST(GlauberCollide, ChangesAtMostOneSite) {
  Rng rng(17);
  const auto J = oracle::random_couplings(5, 0.5, rng);
  for (int i = 0; i < 2000; ++i) {
    const auto s = oracle::random_config(5, rng), sp = oracle::random_config(5, rng);
    const auto [t, tp] = glauber_collide_pair(s, sp, J, rng);
    EXPECT_LE(std::popcount(t.bits ^ s.bits), 1);
    EXPECT_EQ(t.bits & tp.bits, s.bits & sp.bits);
    EXPECT_EQ(t.bits | tp.bits, s.bits | sp.bits);
  }
  const auto [a, b] = glauber_collide_pair(SpinConfig{3}, SpinConfig{3}, J, rng);
  EXPECT_EQ(a.bits, 3U);
  EXPECT_EQ(b.bits, 3U);
}

TEST(GlauberCollide, SwapFrequencyMatchesAlpha) {
  Rng rng(18);
  const auto J = oracle::random_couplings(3, 0.8, rng);
  const SpinConfig s{0b101}, sp{0b010};
  const int draws = 300000;
  std::vector<int> chosen(3, 0), swapped(3, 0);
  for (int i = 0; i < draws; ++i) {
    const auto [t, tp] = glauber_collide_pair(s, sp, J, rng);
    // every site differs here, so the chosen site is identified only on a swap;
    // count swaps per site and compare to alpha_x / n
    if (t != s)
      ++swapped[std::countr_zero(t.bits ^ s.bits)];
  }
  for (int x = 0; x < 3; ++x) {
    const double expect = alpha(x, s, sp, J) / 3.0;
    EXPECT_NEAR(swapped[x] / double(draws), expect, oracle::three_se(expect, draws));
  }
  // J = 0: swap w.p. 1/2 at the chosen site
  int any = 0;
  for (int i = 0; i < draws; ++i)
    any += glauber_collide_pair(s, sp, InteractionMatrix(3), rng).first != s;
  EXPECT_NEAR(any / double(draws), 0.5, oracle::three_se(0.5, draws));
}

class KernelMatrixProperties : public ::testing::TestWithParam<Dynamics> {};

TEST_P(KernelMatrixProperties, StochasticSymmetricPositiveReversible) {
  Rng rng(19);
  for (int n = 1; n <= 3; ++n) {
    const auto J = oracle::random_couplings(n, 0.5, rng);
    const auto q = kernel_matrix(GetParam(), J);
    const std::size_t S = q.states();
    for (int hi = 0; hi < 3; ++hi) {
      const auto mu = gibbs_distribution(J, oracle::random_fields(n, 1.0, rng));
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t sp = 0; sp < S; ++sp)
          for (std::size_t t = 0; t < S; ++t)
            for (std::size_t tp = 0; tp < S; ++tp)
              ASSERT_NEAR(mu[s] * mu[sp] * q(s, sp, t, tp), mu[t] * mu[tp] * q(t, tp, s, sp), 1e-15);
    }
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t sp = 0; sp < S; ++sp) {
        double row = 0.0;
        for (std::size_t t = 0; t < S; ++t)
          for (std::size_t tp = 0; tp < S; ++tp) {
            row += q(s, sp, t, tp);
            EXPECT_NEAR(q(s, sp, t, tp), q(sp, s, tp, t), 1e-15);
          }
        EXPECT_NEAR(row, 1.0, 1e-12);
        EXPECT_GT(q(s, sp, s, sp), 0.0);
      }
  }
}

INSTANTIATE_TEST_SUITE_P(Both, KernelMatrixProperties, ::testing::Values(Dynamics::block, Dynamics::glauber),
                         [](const auto &info) { return to_string(info.param); });

TEST(KernelMatrix, CapEnforced) { EXPECT_THROW(kernel_matrix(Dynamics::block, InteractionMatrix(4)), CapExceeded); }

TEST(KernelAudit, CleanKernelsPassAndDefectsShow) {
  Rng rng(31);
  const auto J = oracle::random_couplings(3, 0.5, rng);
  std::vector<DenseDistribution> mus;
  for (int i = 0; i < 3; ++i)
    mus.push_back(gibbs_distribution(J, oracle::random_fields(3, 1.0, rng)));
  for (Dynamics kind : {Dynamics::block, Dynamics::glauber}) {
    const KernelAudit a = audit_kernel(kernel_matrix(kind, J), mus);
    EXPECT_LE(a.worst_residual(), 1e-12);
    EXPECT_GT(a.min_diagonal, 0.0);
  }
  // move mass from one transition to another: row sums hold, symmetry and balance break
  KernelMatrix q = kernel_matrix(Dynamics::glauber, J);
  q.at(1, 2, 2, 1) += 0.01;
  q.at(1, 2, 1, 2) -= 0.01;
  const KernelAudit bad = audit_kernel(q, mus);
  EXPECT_LE(bad.row_sum, 1e-12);
  EXPECT_NEAR(bad.symmetry, 0.01, 1e-9);
  EXPECT_GT(bad.detailed_balance, 1e-4);
}
