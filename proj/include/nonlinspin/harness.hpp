#pragma once

// Experiment configs and runners. A run is a pure function of its config:
// every random draw derives from (seed, trial index), and every output file
// starts with a comment line naming the config hash and seed.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nonlinspin/evolution.hpp"
#include "nonlinspin/fragmentation.hpp"
#include "nonlinspin/population.hpp"
#include "nonlinspin/stats.hpp"

namespace nonlinspin {

enum class ExperimentKind {
  tv_curve,
  entropy_curve,
  extinction,
  coupon,
  branching_tail,
  kac_compare,
  field_infer,
  kernel_audit,
};

inline const std::vector<std::pair<ExperimentKind, std::string>> &experiment_names() {
  static const std::vector<std::pair<ExperimentKind, std::string>> names{
      {ExperimentKind::tv_curve, "tv-curve"},         {ExperimentKind::entropy_curve, "entropy-curve"},
      {ExperimentKind::extinction, "extinction"},     {ExperimentKind::coupon, "coupon"},
      {ExperimentKind::branching_tail, "branching-tail"}, {ExperimentKind::kac_compare, "kac-compare"},
      {ExperimentKind::field_infer, "field-infer"},   {ExperimentKind::kernel_audit, "kernel-audit"},
  };
  return names;
}

inline std::string to_string(ExperimentKind kind) {
  for (const auto &[k, name] : experiment_names())
    if (k == kind)
      return name;
  return "unknown";
}

inline ExperimentKind parse_experiment_kind(const std::string &s) {
  for (const auto &[k, name] : experiment_names())
    if (name == s)
      return k;
  throw InvalidArgument("unknown experiment kind '" + s + "'");
}

/// Exit codes of run_experiment and the CLI.
enum ExitCode : int { kExitOk = 0, kExitInvalidConfig = 2, kExitCapExceeded = 3, kExitNumericalFailure = 4 };

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4)
    out[i] = digits[v & 0xF];
  return out;
}

/// Settings for one experiment. Parsed from a flat `key = value` file; the
/// keys and defaults are listed in parse_config.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::tv_curve;

  // model: a model file, or a generated coupling matrix
  std::string model_path;
  std::string model_gen = "uniform";  // uniform | random | zero | rho0
  int n = 0;
  double norm = 0.0;
  double rho0 = 0.0;
  std::uint64_t model_seed = 1;

  std::string init = "uniform";
  Dynamics dynamics = Dynamics::block;
  std::vector<int> t_grid;
  std::size_t trials = 1000;
  std::uint64_t seed = 0;
  std::string out = ".";
  int fit_from = 2;
  Caps caps;
  std::size_t guard = kDefaultFragmentGuard;
  std::size_t population = 10000;
  std::size_t samples = 0;
  double field_scale = 1.0;
  int ell_max = 6;
  double moment_exponent = 0.8;
  int site = 0;
  int solver_iterations = FieldSolveOptions{}.max_iterations;
  unsigned threads = 0;

  /// Canonical `key=value` lines (sorted, seed resolved, out/threads
  /// dropped) that the config hash is taken over.
  std::map<std::string, std::string> entries;

  std::string canonical_text() const {
    std::string text;
    for (const auto &[k, v] : entries)
      if (k != "out" && k != "threads")
        text += k + "=" + v + "\n";
    return text;
  }
  std::uint64_t hash() const { return fnv1a64(canonical_text()); }
};

namespace detail {

inline std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos)
    return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_u64(const std::string &key, const std::string &v) {
  try {
    return parse_unsigned(v);
  } catch (const InvalidArgument &) {
    throw InvalidArgument(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline int parse_int(const std::string &key, const std::string &v) {
  const std::uint64_t u = parse_u64(key, v);
  require(u <= static_cast<std::uint64_t>(std::numeric_limits<int>::max()), key + ": value too large");
  return static_cast<int>(u);
}

inline double parse_double(const std::string &key, const std::string &v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  require(used == v.size() && used > 0 && std::isfinite(out), key + ": expected a number, got '" + v + "'");
  return out;
}

/// `a:b` (inclusive) or `t1,t2,...`.
inline std::vector<int> parse_t_grid(const std::string &v) {
  std::vector<int> grid;
  const auto colon = v.find(':');
  if (colon != std::string::npos) {
    const int a = parse_int("t_grid", trim(v.substr(0, colon)));
    const int b = parse_int("t_grid", trim(v.substr(colon + 1)));
    require(a <= b, "t_grid: empty range");
    for (int t = a; t <= b; ++t)
      grid.push_back(t);
  } else {
    std::stringstream in(v);
    std::string item;
    while (std::getline(in, item, ','))
      grid.push_back(parse_int("t_grid", trim(item)));
  }
  require(!grid.empty(), "t_grid is empty");
  for (std::size_t i = 1; i < grid.size(); ++i)
    require(grid[i] > grid[i - 1], "t_grid must be strictly increasing");
  return grid;
}

} // namespace detail

/// Reads `key = value` lines; `#` starts a comment. Unknown or repeated keys
/// are errors. `seed_override`, when set, replaces the seed key.
inline ExperimentConfig parse_config(std::istream &in, std::optional<std::uint64_t> seed_override = std::nullopt) {
  ExperimentConfig c;
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = detail::trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    require(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
    require(kv.emplace(key, value).second, "config line " + std::to_string(lineno) + ": duplicate key " + key);
  }
  if (seed_override)
    kv["seed"] = std::to_string(*seed_override);

  for (const auto &[key, v] : kv) {
    if (key == "experiment")
      c.kind = parse_experiment_kind(v);
    else if (key == "model")
      c.model_path = v;
    else if (key == "model_gen") {
      require(v == "uniform" || v == "random" || v == "zero" || v == "rho0",
              "model_gen must be uniform, random, zero or rho0");
      c.model_gen = v;
    } else if (key == "n")
      c.n = detail::parse_int(key, v);
    else if (key == "norm")
      c.norm = detail::parse_double(key, v);
    else if (key == "rho0")
      c.rho0 = detail::parse_double(key, v);
    else if (key == "model_seed")
      c.model_seed = detail::parse_u64(key, v);
    else if (key == "init")
      c.init = v;
    else if (key == "dynamics")
      c.dynamics = parse_dynamics(v);
    else if (key == "t_grid")
      c.t_grid = detail::parse_t_grid(v);
    else if (key == "trials")
      c.trials = detail::parse_u64(key, v);
    else if (key == "seed")
      c.seed = detail::parse_u64(key, v);
    else if (key == "out")
      c.out = v;
    else if (key == "fit_from")
      c.fit_from = detail::parse_int(key, v);
    else if (key == "cap_exact")
      c.caps.exact = detail::parse_int(key, v);
    else if (key == "cap_exchange")
      c.caps.exchange = detail::parse_int(key, v);
    else if (key == "cap_dense_block")
      c.caps.dense_block = detail::parse_int(key, v);
    else if (key == "cap_dense_glauber")
      c.caps.dense_glauber = detail::parse_int(key, v);
    else if (key == "cap_tree_depth")
      c.caps.tree_depth = detail::parse_int(key, v);
    else if (key == "guard")
      c.guard = detail::parse_u64(key, v);
    else if (key == "population")
      c.population = detail::parse_u64(key, v);
    else if (key == "samples")
      c.samples = detail::parse_u64(key, v);
    else if (key == "field_scale")
      c.field_scale = detail::parse_double(key, v);
    else if (key == "ell_max")
      c.ell_max = detail::parse_int(key, v);
    else if (key == "moment_exponent")
      c.moment_exponent = detail::parse_double(key, v);
    else if (key == "site")
      c.site = detail::parse_int(key, v);
    else if (key == "solver_iterations")
      c.solver_iterations = detail::parse_int(key, v);
    else if (key == "threads")
      c.threads = static_cast<unsigned>(detail::parse_int(key, v));
    else
      throw InvalidArgument("unknown config key '" + key + "'");
  }

  require(kv.count("experiment") == 1, "config needs an experiment key");
  require(c.trials >= 1, "trials must be at least 1");
  require(c.guard >= 1, "guard must be at least 1");
  require(c.solver_iterations >= 1, "solver_iterations must be at least 1");
  require(c.norm >= 0.0, "norm must be non-negative");
  require(c.field_scale >= 0.0, "field_scale must be non-negative");
  require(c.ell_max >= 1 && c.ell_max <= kMaxSites, "ell_max out of range");
  if (c.model_path.empty()) {
    require(c.n >= 1 && c.n <= kMaxSites, "generated models need n in [1, 63]");
    if (c.model_gen == "rho0")
      require(kv.count("rho0") == 1 && c.rho0 >= 0.0 && c.rho0 < 1.0, "model_gen = rho0 needs rho0 in [0, 1)");
  } else {
    require(kv.count("model_gen") == 0 && kv.count("norm") == 0, "model and model_gen/norm are exclusive");
  }
  if (c.t_grid.empty()) {
    c.t_grid = detail::parse_t_grid("0:10");
    kv["t_grid"] = "0:10";
  }
  kv["seed"] = std::to_string(c.seed);
  c.entries = std::move(kv);
  return c;
}

inline ExperimentConfig load_config(const std::string &path, std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open config file " + path);
  return parse_config(in, seed_override);
}

/// Couplings with every p_xy = rho0 / (n - 1), so that rho_0 = rho0.
inline InteractionMatrix rho0_interaction(int n, double rho0) {
  if (n < 2)
    return InteractionMatrix(n);
  const double p = rho0 / (n - 1);
  return uniform_interaction(n, -std::log1p(-p) / 4.0 * (n - 1));
}

/// Couplings and fields named by the config; generated models have h = 0.
inline ModelSpec build_model(const ExperimentConfig &c) {
  if (!c.model_path.empty()) {
    ModelSpec spec = load_model(c.model_path);
    require(c.n == 0 || c.n == spec.J.sites(), "n disagrees with the model file");
    return spec;
  }
  ModelSpec spec{InteractionMatrix(c.n), FieldVector(c.n)};
  if (c.model_gen == "uniform") {
    spec.J = uniform_interaction(c.n, c.norm);
  } else if (c.model_gen == "random") {
    Rng rng(c.model_seed);
    spec.J = random_interaction(c.n, c.norm, rng);
  } else if (c.model_gen == "rho0") {
    spec.J = rho0_interaction(c.n, c.rho0);
  }
  return spec;
}

/// Files and JSON summary produced by a run. Files are kept in memory and
/// written together, so a failed run still leaves what it had computed.
struct Report {
  std::string header;  // `# config_hash=... seed=...`
  std::vector<std::pair<std::string, std::string>> files;
  nlohmann::ordered_json summary;
  int exit_code = kExitOk;

  std::ostringstream &open(const std::string &name) {
    streams_.emplace_back(name, std::make_unique<std::ostringstream>());
    *streams_.back().second << header << '\n';
    return *streams_.back().second;
  }

  void collect() {
    for (auto &[name, s] : streams_)
      files.emplace_back(name, s->str());
    streams_.clear();
  }

private:
  std::vector<std::pair<std::string, std::unique_ptr<std::ostringstream>>> streams_;
};

namespace detail {

inline ExponentialFit tail_fit(const std::vector<int> &ts, const std::vector<double> &ys, int fit_from) {
  std::vector<double> ft, fy;
  for (std::size_t i = 0; i < ts.size(); ++i)
    if (ts[i] >= fit_from) {
      ft.push_back(ts[i]);
      fy.push_back(ys[i]);
    }
  return fit_exponential(ft, fy);
}

inline void put_fit(nlohmann::ordered_json &j, const ExponentialFit &fit, int fit_from) {
  j["fit_from"] = fit_from;
  j["fit_points"] = fit.points;
  j["rate"] = fit.rate;
  j["r2"] = fit.r2;
}

/// p_0 from the initial law and mu with the same marginals.
struct DensePair {
  DenseDistribution p0;
  DenseDistribution target;
};

inline DensePair dense_setup(const ExperimentConfig &c, const InteractionMatrix &J) {
  const InitialLaw law = parse_initial_law(c.init, J.sites());
  check_dense_cap(c.dynamics, J.sites(), c.caps);
  const DenseDistribution p0 = law.distribution();
  FieldSolveOptions opt;
  opt.exact_cap = c.caps.exact;
  opt.max_iterations = c.solver_iterations;
  const FieldVector h = solve_fields(J, marginals(p0), opt);
  return {p0, gibbs_distribution(J, h, c.caps.exact)};
}

inline void run_tv_curve(const ExperimentConfig &c, const ModelSpec &m, Report &r) {
  const auto [p0, target] = dense_setup(c, m.J);
  const int n = m.J.sites();
  const bool bound = c.dynamics == Dynamics::block && m.J.is_zero();
  auto &csv = r.open(to_string(c.kind) + ".csv");
  csv << "t,tv,bound\n";
  std::vector<double> tv;
  DenseDistribution cur = p0;
  int at = 0;
  for (int t : c.t_grid) {
    for (; at < t; ++at)
      cur = collide_dense(cur, cur, c.dynamics, m.J, c.caps);
    tv.push_back(tv_distance(cur, target));
    const double b = bound && t >= 1 ? n * (n - 1) / 2.0 * std::ldexp(1.0, -t) : std::nan("");
    csv << t << ',' << format_number(tv.back()) << ',' << format_number(b) << '\n';
  }
  put_fit(r.summary, tail_fit(c.t_grid, tv, c.fit_from), c.fit_from);
  r.summary["final_tv"] = tv.back();
}

/// Relative entropy is tracked at every step up to the last grid point.
/// Steps where it has already reached the rounding floor are not counted
/// as violations.
inline constexpr double kEntropyFloor = 1e-13;

inline void run_entropy_curve(const ExperimentConfig &c, const ModelSpec &m, Report &r) {
  const auto [p0, target] = dense_setup(c, m.J);
  auto &csv = r.open(to_string(c.kind) + ".csv");
  csv << "t,relative_entropy,tv\n";
  std::vector<double> d;
  std::size_t violations = 0, exempt = 0;
  double prev = std::numeric_limits<double>::infinity();
  DenseDistribution cur = p0;
  std::size_t next = 0;
  for (int t = 0; t <= c.t_grid.back(); ++t) {
    if (t > 0)
      cur = collide_dense(cur, cur, c.dynamics, m.J, c.caps);
    const double e = relative_entropy(cur, target);
    if (t > 0 && !(e < prev)) {
      if (prev <= kEntropyFloor)
        ++exempt;
      else
        ++violations;
    }
    prev = e;
    if (next < c.t_grid.size() && c.t_grid[next] == t) {
      d.push_back(e);
      csv << t << ',' << format_number(e) << ',' << format_number(tv_distance(cur, target)) << '\n';
      ++next;
    }
  }
  put_fit(r.summary, tail_fit(c.t_grid, d, c.fit_from), c.fit_from);
  r.summary["violations"] = violations;
  r.summary["floor_exempt_steps"] = exempt;
}

inline void run_extinction(const ExperimentConfig &c, const ModelSpec &m, Report &r) {
  const ProcessSpec spec{c.kind == ExperimentKind::coupon ? ProcessKind::coupon : ProcessKind::fragmentation, m.J,
                         c.guard};
  const ExtinctionEstimate est = estimate_extinction(spec, c.t_grid, c.trials, c.seed, c.threads);
  write_extinction_csv(r.open(to_string(c.kind) + ".csv"), est.points);
  std::vector<double> p;
  std::size_t above = 0;
  for (const auto &pt : est.points) {
    p.push_back(pt.p_hat);
    if (!std::isnan(pt.bound) && pt.p_hat > pt.bound + kThreeSigma * binomial_se(pt.p_hat, pt.trials))
      ++above;
  }
  put_fit(r.summary, tail_fit(c.t_grid, p, c.fit_from), c.fit_from);
  r.summary["guard_hits"] = est.guard_hits;
  r.summary["points_above_bound"] = above;
}

inline void run_branching_tail(const ExperimentConfig &c, const ModelSpec &m, Report &r) {
  const GraphWeights w(m.J);
  const int n = m.J.sites();
  require(c.site >= 0 && c.site < n, "site out of range");
  const int L = c.ell_max;
  // stream 0 feeds the tail draws, stream t + 1 the branching runs of length t
  std::vector<std::vector<char>> comp(c.trials, std::vector<char>(L + 1)), nb(c.trials, std::vector<char>(L + 1));
  parallel_for(
      c.trials,
      [&](std::size_t i) {
        Rng rng(derive_seed(derive_seed(c.seed, 0), i));
        const int cs = component_sample(c.site, w, rng).size();
        const int ns = neighbour_sample(c.site, w, rng).size();
        for (int l = 0; l <= L; ++l) {
          comp[i][l] = cs >= l;
          nb[i][l] = ns >= l;
        }
      },
      c.threads);
  const double rho0 = w.rho_0();
  auto &tail = r.open(to_string(c.kind) + ".csv");
  tail << "ell,p_component,se_component,bound_component,p_neighbour,se_neighbour,bound_neighbour\n";
  std::size_t above = 0;
  for (int l = 1; l <= L; ++l) {
    std::size_t kc = 0, kn = 0;
    for (std::size_t i = 0; i < c.trials; ++i) {
      kc += comp[i][l];
      kn += nb[i][l];
    }
    const double pc = static_cast<double>(kc) / c.trials, pn = static_cast<double>(kn) / c.trials;
    const double sc = binomial_se(pc, c.trials), sn = binomial_se(pn, c.trials);
    const double bc = l >= 2 ? 2.0 * std::pow(4.0 * rho0, l - 1) : std::nan("");
    const double bn = std::pow(rho0, l);
    above += (l >= 2 && pc > bc + kThreeSigma * sc) + (pn > bn + kThreeSigma * sn);
    tail << l << ',' << format_number(pc) << ',' << format_number(sc) << ',' << format_number(bc) << ','
         << format_number(pn) << ',' << format_number(sn) << ',' << format_number(bn) << '\n';
  }

  auto &mom = r.open("branching_moment.csv");
  mom << "t,trials,guard_hits,log_mean,mean,mean_total\n";
  const double a = c.moment_exponent * std::log(2.0);
  nlohmann::ordered_json moments = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < c.t_grid.size(); ++k) {
    const int t = c.t_grid[k];
    std::vector<BranchingRun> runs(c.trials);
    parallel_for(
        c.trials,
        [&](std::size_t i) {
          Rng rng(derive_seed(derive_seed(c.seed, static_cast<std::uint64_t>(t) + 1), i));
          runs[i] = run_labeled_branching(c.site, w, t, rng, c.guard);
        },
        c.threads);
    // log E[2^{s N}] by log-sum-exp; a run stopped by the guard counts with N = guard + 1
    std::vector<double> logs;
    std::size_t hits = 0;
    double mean_total = 0.0;
    for (const auto &run : runs) {
      hits += run.guard_exceeded;
      const double N = run.guard_exceeded ? static_cast<double>(c.guard + 1) : static_cast<double>(run.total);
      logs.push_back(a * N);
      mean_total += N / c.trials;
    }
    const double log_mean = log_sum_exp(logs) - std::log(static_cast<double>(c.trials));
    mom << t << ',' << c.trials << ',' << hits << ',' << format_number(log_mean) << ','
        << format_number(std::exp(log_mean)) << ',' << format_number(mean_total) << '\n';
    moments.push_back({{"t", t}, {"log_mean", log_mean}, {"guard_hits", hits}});
  }
  r.summary["rho0"] = rho0;
  r.summary["tail_points_above_bound"] = above;
  r.summary["moments"] = moments;
}

inline void run_kac_compare(const ExperimentConfig &c, const ModelSpec &m, Report &r) {
  const int n = m.J.sites();
  const InitialLaw law = parse_initial_law(c.init, n);
  const int t_max = c.t_grid.back();
  ExchangeOptions opt;
  opt.cap = c.caps.exchange;
  Rng rng(derive_seed(c.seed, 0));
  const PopulationRun run = run_population(law, c.population, c.dynamics, m.J, t_max, rng, opt);
  const bool dense = n <= kEmpiricalLawCap;

  auto &csv = r.open(to_string(c.kind) + ".csv");
  csv << "t,tv_to_evolve,max_count_drift\n";
  std::vector<PopulationStats> shown;
  DenseDistribution cur = dense ? law.distribution() : DenseDistribution();
  int at = 0;
  double last_tv = std::nan("");
  std::int64_t drift = 0;
  const auto &counts0 = run.trajectory.front().counts;
  for (int t : c.t_grid) {
    const PopulationStats &st = run.trajectory[t];
    shown.push_back(st);
    std::int64_t d = 0;
    for (int x = 0; x < n; ++x)
      d = std::max<std::int64_t>(d, std::abs(st.counts[x] - counts0[x]));
    drift = std::max(drift, d);
    double tv = std::nan("");
    if (dense) {
      for (; at < t; ++at)
        cur = collide_dense(cur, cur, c.dynamics, m.J, c.caps);
      tv = tv_distance(DenseDistribution(n, st.empirical), cur);
      last_tv = tv;
    }
    csv << t << ',' << format_number(tv) << ',' << d << '\n';
  }
  write_population_csv(r.open("population.csv"), shown);
  r.summary["population"] = c.population;
  r.summary["max_count_drift"] = drift;
  if (dense)
    r.summary["final_tv"] = last_tv;

  if (c.samples > 0) {
    const TreeSampler sampler = c.dynamics == Dynamics::block ? TreeSampler::block : TreeSampler::glauber_lazy;
    // tree draws use stream 1 so they do not overlap the population stream
    const TreeBatch batch =
        sample_tree_batch(sampler, law, m.J, t_max, c.samples, derive_seed(c.seed, 1), c.threads, c.guard, c.caps);
    std::ostringstream hex;
    write_samples_hex(hex, batch.samples);
    r.files.emplace_back("samples.hex", hex.str());
    r.summary["samples"] = batch.samples.size();
    r.summary["sample_guard_hits"] = batch.guard_hits;
    if (dense && !batch.samples.empty())
      r.summary["sample_tv"] = tv_distance(empirical_distribution(n, batch.samples), cur);
    if (sampler == TreeSampler::glauber_lazy)
      r.summary["mean_resolved_nodes"] = batch.mean_nodes();
  }
}

inline void run_field_infer(const ExperimentConfig &c, const ModelSpec &m, Report &r) {
  const int n = m.J.sites();
  FieldSolveOptions opt;
  opt.exact_cap = c.caps.exact;
  opt.max_iterations = c.solver_iterations;
  auto &csv = r.open(to_string(c.kind) + ".csv");
  csv << "trial,site,h_true,h_recovered,abs_error\n";
  double worst = 0.0;
  for (std::size_t i = 0; i < c.trials; ++i) {
    Rng rng(derive_seed(c.seed, i));
    std::uniform_real_distribution<double> u(-c.field_scale, c.field_scale);
    FieldVector h(n);
    for (int x = 0; x < n; ++x)
      h[x] = u(rng);
    const auto target = marginals(gibbs_distribution(m.J, h, c.caps.exact));
    const FieldVector got = solve_fields(m.J, target, opt);
    for (int x = 0; x < n; ++x) {
      const double e = std::abs(got[x] - h[x]);
      worst = std::max(worst, e);
      csv << i << ',' << x << ',' << format_number(h[x]) << ',' << format_number(got[x]) << ','
          << format_number(e) << '\n';
    }
  }
  r.summary["max_abs_error"] = worst;
}

inline constexpr double kAuditTolerance = 1e-12;

inline void run_kernel_audit(const ExperimentConfig &c, const ModelSpec &m, Report &r) {
  const int n = m.J.sites();
  std::vector<DenseDistribution> mus;
  for (std::size_t i = 0; i < c.trials; ++i) {
    Rng rng(derive_seed(c.seed, i));
    std::uniform_real_distribution<double> u(-c.field_scale, c.field_scale);
    FieldVector h(n);
    for (int x = 0; x < n; ++x)
      h[x] = u(rng);
    mus.push_back(gibbs_distribution(m.J, h, c.caps.exact));
  }
  auto &csv = r.open(to_string(c.kind) + ".csv");
  csv << "dynamics,row_sum,symmetry,min_diagonal,detailed_balance\n";
  double worst = 0.0, min_diag = 1.0;
  for (Dynamics kind : {Dynamics::block, Dynamics::glauber}) {
    const KernelAudit a = audit_kernel(kernel_matrix(kind, m.J), mus);
    worst = std::max(worst, a.worst_residual());
    min_diag = std::min(min_diag, a.min_diagonal);
    csv << to_string(kind) << ',' << format_number(a.row_sum) << ',' << format_number(a.symmetry) << ','
        << format_number(a.min_diagonal) << ',' << format_number(a.detailed_balance) << '\n';
  }
  r.summary["max_residual"] = worst;
  r.summary["min_diagonal"] = min_diag;
  r.summary["passed"] = worst <= kAuditTolerance && min_diag > 0.0;
}

} // namespace detail

/// Runs the experiment; never throws for failures inside the run. Errors
/// set exit_code and a `status`/`error` pair in the summary, and whatever
/// was produced before the failure is kept.
inline Report run_experiment_report(const ExperimentConfig &c) {
  Report r;
  r.header = "# config_hash=" + hex64(c.hash()) + " seed=" + std::to_string(c.seed);
  r.summary["experiment"] = to_string(c.kind);
  r.summary["config_hash"] = hex64(c.hash());
  r.summary["seed"] = c.seed;
  auto fail = [&](int code, const char *status, const std::string &what) {
    r.exit_code = code;
    r.summary["status"] = status;
    r.summary["error"] = what;
  };
  try {
    const ModelSpec m = build_model(c);
    r.summary["n"] = m.J.sites();
    r.summary["dobrushin_norm"] = dobrushin_norm(m.J);
    switch (c.kind) {
    case ExperimentKind::tv_curve:
      detail::run_tv_curve(c, m, r);
      break;
    case ExperimentKind::entropy_curve:
      detail::run_entropy_curve(c, m, r);
      break;
    case ExperimentKind::extinction:
    case ExperimentKind::coupon:
      detail::run_extinction(c, m, r);
      break;
    case ExperimentKind::branching_tail:
      detail::run_branching_tail(c, m, r);
      break;
    case ExperimentKind::kac_compare:
      detail::run_kac_compare(c, m, r);
      break;
    case ExperimentKind::field_infer:
      detail::run_field_infer(c, m, r);
      break;
    case ExperimentKind::kernel_audit:
      detail::run_kernel_audit(c, m, r);
      break;
    }
    r.summary["status"] = "ok";
  } catch (const CapExceeded &e) {
    fail(kExitCapExceeded, "cap_exceeded", e.what());
  } catch (const NumericalFailure &e) {
    fail(kExitNumericalFailure, "numerical_failure", e.what());
  } catch (const InvalidArgument &e) {
    fail(kExitInvalidConfig, "invalid_config", e.what());
  }
  r.collect();
  return r;
}

/// Writes the report's files and `<kind>.json` into `dir`.
inline void write_report(const Report &r, const ExperimentConfig &c, const std::filesystem::path &dir) {
  std::filesystem::create_directories(dir);
  for (const auto &[name, text] : r.files) {
    std::ofstream out(dir / name, std::ios::binary);
    require(static_cast<bool>(out), "cannot write " + (dir / name).string());
    out << text;
  }
  std::ofstream json(dir / (to_string(c.kind) + ".json"), std::ios::binary);
  require(static_cast<bool>(json), "cannot write summary into " + dir.string());
  json << r.summary.dump(2) << '\n';
}

/// Runs and writes into c.out; returns the exit code.
inline int run_experiment(const ExperimentConfig &c) {
  const Report r = run_experiment_report(c);
  write_report(r, c, c.out);
  return r.exit_code;
}

} // namespace nonlinspin
