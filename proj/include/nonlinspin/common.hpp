#pragma once

// Shared vocabulary: spin configurations and site sets as bitmasks, error
// types, capacity limits and seeding helpers.

#include <algorithm>
#include <bit>
#include <exception>
#include <mutex>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace nonlinspin {

using Rng = std::mt19937_64;

inline constexpr int kMaxSites = 63;

/// Raised when inputs do not describe a consistent problem (size mismatch,
/// out-of-range index, degenerate marginal, ...).
class InvalidArgument : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a requested exact computation exceeds a configured cap.
class CapExceeded : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised when an iterative solver fails to reach its tolerance.
class NumericalFailure : public std::runtime_error {
public:
  NumericalFailure(const std::string &what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

private:
  double residual_;
};

/// A set of sites, bit x set iff site x belongs to the set.
struct SiteSet {
  std::uint64_t mask = 0;

  static constexpr SiteSet full(int n) {
    return SiteSet{n >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << n) - 1};
  }
  static constexpr SiteSet single(int x) { return SiteSet{std::uint64_t{1} << x}; }

  constexpr bool contains(int x) const { return (mask >> x) & 1U; }
  constexpr int size() const { return std::popcount(mask); }
  constexpr bool empty() const { return mask == 0; }
  constexpr void insert(int x) { mask |= std::uint64_t{1} << x; }
  constexpr void erase(int x) { mask &= ~(std::uint64_t{1} << x); }

  constexpr SiteSet operator|(SiteSet o) const { return {mask | o.mask}; }
  constexpr SiteSet operator&(SiteSet o) const { return {mask & o.mask}; }
  constexpr SiteSet operator^(SiteSet o) const { return {mask ^ o.mask}; }
  constexpr SiteSet minus(SiteSet o) const { return {mask & ~o.mask}; }
  constexpr bool subset_of(SiteSet o) const { return (mask & ~o.mask) == 0; }
  friend constexpr bool operator==(SiteSet, SiteSet) = default;

  std::vector<int> sites() const {
    std::vector<int> out;
    for (std::uint64_t m = mask; m != 0; m &= m - 1)
      out.push_back(std::countr_zero(m));
    return out;
  }
};

/// A configuration sigma in {-1,+1}^n; bit x set iff sigma_x = +1.
struct SpinConfig {
  std::uint64_t bits = 0;

  constexpr int spin(int x) const { return ((bits >> x) & 1U) ? 1 : -1; }
  constexpr SpinConfig flipped(int x) const { return {bits ^ (std::uint64_t{1} << x)}; }
  friend constexpr bool operator==(SpinConfig, SpinConfig) = default;
};

/// Takes sigma on `take` and other elsewhere.
constexpr SpinConfig splice(SpinConfig sigma, SpinConfig other, SiteSet take) {
  return {(sigma.bits & take.mask) | (other.bits & ~take.mask)};
}

inline void require(bool ok, const std::string &message) {
  if (!ok)
    throw InvalidArgument(message);
}

inline void check_site_count(int n) {
  require(n >= 1 && n <= kMaxSites, "site count must be in [1, 63]");
}

/// Caps on exponential-cost exact computations. All configurable.
struct Caps {
  int exact = 20;           // dense 2^n distributions
  int exchange = 20;        // exact exchange-set sampling, 2^|D| patterns
  int dense_block = 10;     // block collide, O(6^n)
  int dense_glauber = 12;   // glauber collide, O(4^n n)
  int tree_depth = 24;      // full binary derivation tree
};

inline Caps &default_caps() {
  static Caps caps;
  return caps;
}

/// SplitMix64 finaliser; used to derive independent per-trial seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(mix64(master) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

inline double uniform01(Rng &rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline bool fair_coin(Rng &rng) { return (rng() >> 63) != 0; }

inline int uniform_site(int n, Rng &rng) {
  return std::uniform_int_distribution<int>(0, n - 1)(rng);
}

/// Runs body(i) for i in [0, count) over a small pool of threads. Callers
/// must make body(i) depend only on i (seed per index) and aggregate in a
/// way that is independent of scheduling.
template <class Body>
void parallel_for(std::size_t count, Body &&body, unsigned threads = 0) {
  if (threads == 0)
    threads = std::max(1U, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count == 0 ? 1 : count));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i)
      body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += threads)
          body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure)
          failure = std::current_exception();
      }
    });
  }
  for (auto &th : pool)
    th.join();
  if (failure)
    std::rethrow_exception(failure);
}

} // namespace nonlinspin
