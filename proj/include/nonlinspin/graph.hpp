#pragma once

// Random subgraphs of K_n used to decouple the exchange-set measure: the
// inhomogeneous Erdos-Renyi and random-star measures, the high-temperature
// expansion of gamma over subgraphs, and the monotone coupled graph chain.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "nonlinspin/common.hpp"
#include "nonlinspin/ising.hpp"
#include "nonlinspin/kernels.hpp"

namespace nonlinspin {

using Edge = std::pair<int, int>;

/// Edge subset of K_n. Edges are stored sorted with x < y; the vertex set is
/// the union of edge endpoints, so isolated sites are not part of the graph.
class LabeledGraph {
public:
  LabeledGraph() = default;
  explicit LabeledGraph(int n) : n_(n) { check_site_count(n); }

  LabeledGraph(int n, std::vector<Edge> edges) : n_(n) {
    check_site_count(n);
    for (auto &[x, y] : edges) {
      require(x >= 0 && x < n && y >= 0 && y < n, "edge endpoint out of range");
      require(x != y, "self-loops are not allowed");
      if (x > y)
        std::swap(x, y);
    }
    std::sort(edges.begin(), edges.end());
    require(std::adjacent_find(edges.begin(), edges.end()) == edges.end(), "duplicate edge");
    edges_ = std::move(edges);
  }

  int sites() const { return n_; }
  const std::vector<Edge> &edges() const { return edges_; }
  std::size_t edge_count() const { return edges_.size(); }
  bool empty() const { return edges_.empty(); }

  bool contains(int x, int y) const {
    if (x > y)
      std::swap(x, y);
    return std::binary_search(edges_.begin(), edges_.end(), Edge{x, y});
  }

  SiteSet vertices() const {
    SiteSet v;
    for (auto [x, y] : edges_) {
      v.insert(x);
      v.insert(y);
    }
    return v;
  }

  SiteSet neighbours(int x) const {
    SiteSet out;
    for (auto [a, b] : edges_) {
      if (a == x)
        out.insert(b);
      else if (b == x)
        out.insert(a);
    }
    return out;
  }

  LabeledGraph with_edge(int x, int y) const {
    if (contains(x, y))
      return *this;
    LabeledGraph g = *this;
    const Edge e{std::min(x, y), std::max(x, y)};
    g.edges_.insert(std::lower_bound(g.edges_.begin(), g.edges_.end(), e), e);
    return g;
  }

  LabeledGraph without_edge(int x, int y) const {
    LabeledGraph g = *this;
    const Edge e{std::min(x, y), std::max(x, y)};
    auto it = std::lower_bound(g.edges_.begin(), g.edges_.end(), e);
    if (it != g.edges_.end() && *it == e)
      g.edges_.erase(it);
    return g;
  }

  bool subgraph_of(const LabeledGraph &other) const {
    return std::includes(other.edges_.begin(), other.edges_.end(), edges_.begin(), edges_.end());
  }

  /// Vertex sets of the connected components (union-find over the edges).
  std::vector<SiteSet> components() const {
    std::vector<int> parent(n_);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
      while (parent[x] != x)
        x = parent[x] = parent[parent[x]];
      return x;
    };
    for (auto [x, y] : edges_)
      parent[find(x)] = find(y);
    std::vector<SiteSet> by_root(n_);
    for (int x : vertices().sites())
      by_root[find(x)].insert(x);
    std::vector<SiteSet> out;
    for (SiteSet s : by_root)
      if (!s.empty())
        out.push_back(s);
    return out;
  }

  /// Edges with both endpoints in `sites`.
  LabeledGraph induced(SiteSet sites) const {
    LabeledGraph g(n_);
    for (auto e : edges_)
      if (sites.contains(e.first) && sites.contains(e.second))
        g.edges_.push_back(e);
    return g;
  }

  friend bool operator==(const LabeledGraph &, const LabeledGraph &) = default;

private:
  int n_ = 0;
  std::vector<Edge> edges_;
};

/// All pairs x < y in lexicographic order; position i is bit i of an edge mask.
inline std::vector<Edge> all_edges(int n) {
  std::vector<Edge> out;
  for (int x = 0; x < n; ++x)
    for (int y = x + 1; y < n; ++y)
      out.emplace_back(x, y);
  return out;
}

inline LabeledGraph graph_from_mask(int n, std::uint64_t mask) {
  const auto pairs = all_edges(n);
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if ((mask >> i) & 1U)
      edges.push_back(pairs[i]);
  return {n, std::move(edges)};
}

inline std::uint64_t graph_mask(const LabeledGraph &g) {
  const auto pairs = all_edges(g.sites());
  require(pairs.size() <= 64, "graph too large for an edge mask");
  std::uint64_t mask = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (g.contains(pairs[i].first, pairs[i].second))
      mask |= std::uint64_t{1} << i;
  return mask;
}

/// lambda_xy = e^{4|J_xy|} - 1 and p_xy = 1 - e^{-4|J_xy|} = lambda / (1 + lambda).
class GraphWeights {
public:
  explicit GraphWeights(const InteractionMatrix &J)
      : n_(J.sites()), lambda_(static_cast<std::size_t>(n_) * n_, 0.0), p_(lambda_.size(), 0.0) {
    for (int x = 0; x < n_; ++x)
      for (int y = 0; y < n_; ++y)
        if (x != y) {
          const double a = 4.0 * std::abs(J(x, y));
          lambda_[idx(x, y)] = std::expm1(a);
          p_[idx(x, y)] = -std::expm1(-a);
        }
  }

  int sites() const { return n_; }
  double lambda(int x, int y) const { return lambda_[idx(x, y)]; }
  double p(int x, int y) const { return p_[idx(x, y)]; }

  /// Probability that x has at least one neighbour: 1 - prod_z (1 - p_xz).
  double rho(int x) const {
    double none = 1.0;
    for (int z = 0; z < n_; ++z)
      if (z != x)
        none *= 1.0 - p(x, z);
    return 1.0 - none;
  }

  /// max_x sum_y p_xy.
  double rho_0() const {
    double best = 0.0;
    for (int x = 0; x < n_; ++x) {
      double s = 0.0;
      for (int y = 0; y < n_; ++y)
        if (y != x)
          s += p(x, y);
      best = std::max(best, s);
    }
    return best;
  }

private:
  std::size_t idx(int x, int y) const { return static_cast<std::size_t>(x) * n_ + y; }

  int n_;
  std::vector<double> lambda_, p_;
};

/// Each pair x < y independently with probability p_xy, in lexicographic order.
inline LabeledGraph er_sample(const GraphWeights &w, Rng &rng) {
  const int n = w.sites();
  std::vector<Edge> edges;
  for (int x = 0; x < n; ++x)
    for (int y = x + 1; y < n; ++y)
      if (uniform01(rng) < w.p(x, y))
        edges.emplace_back(x, y);
  return {n, std::move(edges)};
}

inline LabeledGraph er_sample(const InteractionMatrix &J, Rng &rng) { return er_sample(GraphWeights(J), rng); }

/// Subgraph of the star at x: each edge {x,y} independently with probability p_xy.
inline LabeledGraph star_sample(int x, const GraphWeights &w, Rng &rng) {
  const int n = w.sites();
  require(x >= 0 && x < n, "site out of range");
  std::vector<Edge> edges;
  for (int y = 0; y < n; ++y)
    if (y != x && uniform01(rng) < w.p(x, y))
      edges.emplace_back(x, y);
  return {n, std::move(edges)};
}

inline LabeledGraph star_sample(int x, const InteractionMatrix &J, Rng &rng) {
  return star_sample(x, GraphWeights(J), rng);
}

/// Vertex set of the union of the components of G that meet A.
inline SiteSet closure(const LabeledGraph &g, SiteSet a) {
  const int n = g.sites();
  std::vector<SiteSet> adj(n);
  for (auto [x, y] : g.edges()) {
    adj[x].insert(y);
    adj[y].insert(x);
  }
  SiteSet seen = a & g.vertices();
  std::vector<int> queue = seen.sites();
  for (std::size_t head = 0; head < queue.size(); ++head)
    for (int y : adj[queue[head]].minus(seen).sites()) {
      seen.insert(y);
      queue.push_back(y);
    }
  return seen;
}

// ---------------------------------------------------------------------------
// High-temperature expansion of gamma(. | sigma, sigma') over subgraphs.
//
// With eta_x = +1 on L and -1 off L, gamma is proportional to
// prod_e (1 + delta_e(eta_x eta_y)), delta_e(s) = exp(phi_e s + |phi_e|) - 1,
// phi_e = J~_xy. Expanding the product gives weights
//   w(G) = 2^{|V \ V_G|} prod_components w_c(G_i),
//   w_c(G) = sum_{eta on V_G} prod_{e in G} delta_e(eta(e)).

/// delta_e(s) for coupling phi and s = eta_x eta_y.
inline double ht_delta(double phi, int s) { return std::expm1(phi * s + std::abs(phi)); }

namespace detail {

// Maps each vertex of `sites` to its position among the set bits.
inline std::vector<int> positions(SiteSet sites, int n) {
  std::vector<int> pos(n, -1);
  int i = 0;
  for (int x : sites.sites())
    pos[x] = i++;
  return pos;
}

// prod_e delta_e(eta(e)) for every eta on `sites`, eta bit i = +1 at the i-th site.
inline std::vector<double> edge_products(const LabeledGraph &g, SiteSet sites, const InteractionMatrix &phi) {
  const int k = sites.size();
  require(k <= default_caps().exact, "component too large for exact enumeration");
  const auto pos = positions(sites, g.sites());
  const std::uint64_t count = std::uint64_t{1} << k;
  std::vector<double> out(count, 1.0);
  for (std::uint64_t eta = 0; eta < count; ++eta)
    for (auto [x, y] : g.edges()) {
      const int a = pos[x], b = pos[y];
      if (a < 0 || b < 0)
        continue;
      const int s = (((eta >> a) ^ (eta >> b)) & 1U) ? -1 : 1;
      out[eta] *= ht_delta(phi(x, y), s);
      if (out[eta] == 0.0)
        break;
    }
  return out;
}

inline double log_component_weight(const LabeledGraph &g, SiteSet comp, const InteractionMatrix &phi) {
  const auto prods = edge_products(g.induced(comp), comp, phi);
  double total = 0.0;
  for (double v : prods)
    total += v;
  return total > 0.0 ? std::log(total) : -std::numeric_limits<double>::infinity();
}

} // namespace detail

/// log w(G) for interactions phi; -inf marks a structural zero.
inline double ht_log_weight(const LabeledGraph &g, const InteractionMatrix &phi) {
  double out = (g.sites() - g.vertices().size()) * std::log(2.0);
  for (SiteSet c : g.components())
    out += detail::log_component_weight(g, c, phi);
  return out;
}

/// p_{J,sigma,sigma'}(G) for every subgraph G of K_n, indexed by edge mask.
/// Graphs using an edge with phi_e = 0, or a frustrated cycle, get weight 0.
inline std::vector<double> ht_graph_distribution(SpinConfig sigma, SpinConfig sigma_prime, const InteractionMatrix &J,
                                                 int cap = 5) {
  const int n = J.sites();
  if (n > cap)
    throw CapExceeded("subgraph enumeration on " + std::to_string(n) + " sites exceeds cap " + std::to_string(cap));
  const InteractionMatrix phi = tilted_interaction(sigma, sigma_prime, J).entries;
  const std::uint64_t graphs = std::uint64_t{1} << (n * (n - 1) / 2);
  std::vector<double> logw(graphs);
  for (std::uint64_t m = 0; m < graphs; ++m)
    logw[m] = ht_log_weight(graph_from_mask(n, m), phi);
  detail::normalise_log_weights(logw);
  return logw;
}

/// A law over eta restricted to `vertices`; entry i is eta = +1 exactly on the
/// vertices selected by the bits of i (in increasing site order).
struct VertexMeasure {
  SiteSet vertices;
  std::vector<double> probs;
};

/// v_G(eta) = prod_e delta_e(eta(e)) / w_c(G) for connected G.
inline VertexMeasure component_measure(const LabeledGraph &g, SpinConfig sigma, SpinConfig sigma_prime,
                                       const InteractionMatrix &J) {
  require(!g.empty() && g.components().size() == 1, "component measure needs a connected nonempty graph");
  const InteractionMatrix phi = tilted_interaction(sigma, sigma_prime, J).entries;
  const SiteSet v = g.vertices();
  auto prods = detail::edge_products(g, v, phi);
  double total = 0.0;
  for (double p : prods)
    total += p;
  require(total > 0.0, "component weight vanishes: graph has zero probability");
  for (double &p : prods)
    p /= total;
  return {v, std::move(prods)};
}

/// Product over components of the component measures, on V_G.
inline VertexMeasure hat_measure(const LabeledGraph &g, SpinConfig sigma, SpinConfig sigma_prime,
                                 const InteractionMatrix &J) {
  const SiteSet v = g.vertices();
  const auto pos = detail::positions(v, g.sites());
  std::vector<double> out(std::uint64_t{1} << v.size(), 1.0);
  for (SiteSet c : g.components()) {
    const auto part = component_measure(g.induced(c), sigma, sigma_prime, J);
    const std::vector<int> cs = c.sites();
    for (std::uint64_t eta = 0; eta < out.size(); ++eta) {
      std::uint64_t local = 0;
      for (std::size_t i = 0; i < cs.size(); ++i)
        local |= ((eta >> pos[cs[i]]) & 1U) << i;
      out[eta] *= part.probs[local];
    }
  }
  return {v, std::move(out)};
}

/// sum_G p(G) * (hat mu_G x fair coins off V_G), as a law over exchange sets L.
inline std::vector<double> reconstruct_gamma(SpinConfig sigma, SpinConfig sigma_prime, const InteractionMatrix &J,
                                             int cap = 5) {
  const int n = J.sites();
  const auto pg = ht_graph_distribution(sigma, sigma_prime, J, cap);
  const std::uint64_t states = std::uint64_t{1} << n;
  std::vector<double> out(states, 0.0);
  for (std::uint64_t m = 0; m < pg.size(); ++m) {
    if (pg[m] == 0.0)
      continue;
    const LabeledGraph g = graph_from_mask(n, m);
    const auto hat = hat_measure(g, sigma, sigma_prime, J);
    const std::vector<int> vs = hat.vertices.sites();
    const double coins = std::ldexp(1.0, -(n - static_cast<int>(vs.size())));
    for (std::uint64_t l = 0; l < states; ++l) {
      std::uint64_t eta = 0;
      for (std::size_t i = 0; i < vs.size(); ++i)
        eta |= ((l >> vs[i]) & 1U) << i;
      out[l] += pg[m] * hat.probs[eta] * coins;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Monotone coupled chain: X targets p_{J,sigma,sigma'}, Y targets nu_J.

struct CoupledGraphs {
  LabeledGraph x, y;
};

namespace detail {

// Sum over components of g meeting `touch` of log w_c - |C| log 2. The
// difference between G+e and G-e depends only on these terms.
inline double local_log_weight(const LabeledGraph &g, SiteSet touch, const InteractionMatrix &phi) {
  double out = 0.0;
  for (SiteSet c : g.components())
    if (!(c & touch).empty())
      out += log_component_weight(g, c, phi) - c.size() * std::log(2.0);
  return out;
}

} // namespace detail

/// p(G, e, +) = w(G u e) / (w(G \ e) + w(G u e)).
inline double ht_add_probability(const LabeledGraph &g, int x, int y, const InteractionMatrix &phi) {
  SiteSet touch;
  touch.insert(x);
  touch.insert(y);
  const double plus = detail::local_log_weight(g.with_edge(x, y), touch, phi);
  const double minus = detail::local_log_weight(g.without_edge(x, y), touch, phi);
  const double ninf = -std::numeric_limits<double>::infinity();
  require(plus != ninf || minus != ninf, "coupled chain state has zero weight");
  if (plus == ninf)
    return 0.0;
  if (minus == ninf)
    return 1.0;
  return 1.0 / (1.0 + std::exp(minus - plus));
}

/// One step: shared uniform edge and shared uniform U. Requires X subset of Y.
inline CoupledGraphs coupled_chain_step(const CoupledGraphs &state, SpinConfig sigma, SpinConfig sigma_prime,
                                        const InteractionMatrix &J, Rng &rng) {
  const int n = J.sites();
  require(n >= 2, "coupled chain needs at least two sites");
  require(state.x.sites() == n && state.y.sites() == n, "graph and interaction dimensions differ");
  require(state.x.subgraph_of(state.y), "coupled chain requires X to be a subgraph of Y");
  const InteractionMatrix phi = tilted_interaction(sigma, sigma_prime, J).entries;

  const int pairs = n * (n - 1) / 2;
  int k = std::uniform_int_distribution<int>(0, pairs - 1)(rng);
  int a = 0;
  while (k >= n - 1 - a) {
    k -= n - 1 - a;
    ++a;
  }
  const int b = a + 1 + k;
  const double u = uniform01(rng);

  const double p_x = ht_add_probability(state.x, a, b, phi);
  const double p_y = -std::expm1(-4.0 * std::abs(J(a, b)));
  CoupledGraphs next;
  next.x = u < p_x ? state.x.with_edge(a, b) : state.x.without_edge(a, b);
  next.y = u < p_y ? state.y.with_edge(a, b) : state.y.without_edge(a, b);
  return next;
}

} // namespace nonlinspin
