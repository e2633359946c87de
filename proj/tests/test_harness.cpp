#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "nonlinspin/harness.hpp"

using namespace nonlinspin;
namespace fs = std::filesystem;

namespace {

ExperimentConfig config_of(const std::string &text, std::optional<std::uint64_t> seed = std::nullopt) {
  std::istringstream in(text);
  return parse_config(in, seed);
}

std::string file_text(const Report &r, const std::string &name) {
  for (const auto &[n, text] : r.files)
    if (n == name)
      return text;
  ADD_FAILURE() << "no file " << name;
  return {};
}

bool has_file(const Report &r, const std::string &name) {
  for (const auto &f : r.files)
    if (f.first == name)
      return true;
  return false;
}

// Data rows of a CSV, header and comment line dropped.
std::vector<std::vector<std::string>> rows(const std::string &csv) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);  // comment
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ','))
      cells.push_back(cell);
    out.push_back(cells);
  }
  return out;
}

class TempDir {
public:
  TempDir() : path_(fs::temp_directory_path() / ("nonlinspin_test_" + std::to_string(::getpid()) + "_" +
                                                  std::to_string(counter()++))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path &path() const { return path_; }

private:
  static int &counter() {
    static int c = 0;
    return c;
  }
  fs::path path_;
};

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

} // namespace

TEST(Config, DefaultsAndKeys) {
  const auto c = config_of("experiment = extinction\nn = 8\n# comment\nnorm=0.1 # trailing\ntrials = 200\n"
                           "t_grid = 1, 3, 7\nseed = 0x10\n");
  EXPECT_EQ(c.kind, ExperimentKind::extinction);
  EXPECT_EQ(c.n, 8);
  EXPECT_DOUBLE_EQ(c.norm, 0.1);
  EXPECT_EQ(c.trials, 200U);
  EXPECT_EQ(c.t_grid, (std::vector<int>{1, 3, 7}));
  EXPECT_EQ(c.seed, 16U);
  EXPECT_EQ(c.fit_from, 2);
  EXPECT_EQ(c.dynamics, Dynamics::block);
  EXPECT_EQ(config_of("experiment=tv-curve\nn=2\nt_grid=2:5\n").t_grid, (std::vector<int>{2, 3, 4, 5}));
  EXPECT_EQ(config_of("experiment=tv-curve\nn=2\n").t_grid.size(), 11U);
}

TEST(Config, Rejections) {
  const std::string base = "experiment = tv-curve\nn = 3\n";
  EXPECT_THROW(config_of("n = 3\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "bogus = 1\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "n = 4\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "trials = 0\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "trials = -5\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "seed = 12abc\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "norm = fast\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "t_grid = 3, 2\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "t_grid = 5:1\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "dynamics = metropolis\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "model_gen = lattice\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "no equals sign\n"), InvalidArgument);
  EXPECT_THROW(config_of("experiment = tv-curve\n"), InvalidArgument);
  EXPECT_THROW(config_of("experiment = warp\nn = 2\n"), InvalidArgument);
  EXPECT_THROW(config_of(base + "model_gen = rho0\n"), InvalidArgument);
}

TEST(Config, HashIgnoresLayoutAndOutput) {
  const auto a = config_of("experiment = tv-curve\nn = 3\nseed = 5\nout = /tmp/a\n");
  const auto b = config_of("# header\nseed=5\n\nn=3\nexperiment=tv-curve\nout=/tmp/b\nthreads = 3\n");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), config_of("experiment = tv-curve\nn = 3\nseed = 6\n").hash());
  EXPECT_NE(a.hash(), config_of("experiment = tv-curve\nn = 4\nseed = 5\n").hash());
}

TEST(Config, SeedOverride) {
  const auto c = config_of("experiment = tv-curve\nn = 3\nseed = 5\n", 99);
  EXPECT_EQ(c.seed, 99U);
  EXPECT_EQ(c.hash(), config_of("experiment = tv-curve\nn = 3\nseed = 99\n").hash());
}

TEST(Config, Hash) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

TEST(Models, GeneratorsAndFiles) {
  const auto uni = build_model(config_of("experiment=tv-curve\nn=5\nnorm=0.3\n"));
  EXPECT_NEAR(dobrushin_norm(uni.J), 0.3, 1e-12);
  const auto rnd = build_model(config_of("experiment=tv-curve\nn=5\nnorm=0.3\nmodel_gen=random\nmodel_seed=4\n"));
  EXPECT_NEAR(dobrushin_norm(rnd.J), 0.3, 1e-12);
  EXPECT_TRUE(build_model(config_of("experiment=tv-curve\nn=5\nmodel_gen=zero\nnorm=1\n")).J.is_zero());
  const auto r0 = build_model(config_of("experiment=tv-curve\nn=16\nmodel_gen=rho0\nrho0=0.1\n"));
  EXPECT_NEAR(GraphWeights(r0.J).rho_0(), 0.1, 1e-12);

  TempDir dir;
  const auto path = dir.path() / "model.txt";
  {
    std::ofstream out(path);
    write_model(out, uni.J, uni.h);
  }
  const auto loaded = build_model(config_of("experiment=tv-curve\nmodel=" + path.string() + "\n"));
  EXPECT_NEAR(loaded.J(1, 3), uni.J(1, 3), 1e-15);
  EXPECT_THROW(config_of("experiment=tv-curve\nmodel=x\nnorm=0.2\n"), InvalidArgument);
}

TEST(TvCurve, ZeroCouplingHalvesPerStep) {
  const Report r = run_experiment_report(
      config_of("experiment=tv-curve\nn=6\nmodel_gen=zero\ninit=random 11\nt_grid=0:12\nseed=1\n"));
  ASSERT_EQ(r.exit_code, kExitOk) << r.summary.dump();
  EXPECT_GE(r.summary["rate"].get<double>(), 0.5);
  EXPECT_GE(r.summary["r2"].get<double>(), 0.98);
  const auto table = rows(file_text(r, "tv-curve.csv"));
  for (std::size_t i = 1; i < table.size(); ++i) {
    EXPECT_LE(std::stod(table[i][1]), std::stod(table[i][2]));
    // past the first steps every step halves the distance
    if (i >= 3) {
      EXPECT_NEAR(std::stod(table[i][1]) / std::stod(table[i - 1][1]), 0.5, 0.05) << "t " << table[i][0];
    }
  }
}

TEST(TvCurve, CommentLineCarriesHashAndSeed) {
  const auto c = config_of("experiment=tv-curve\nn=3\nnorm=0.2\ninit=random 2\nt_grid=0:3\nseed=42\n");
  const Report r = run_experiment_report(c);
  const std::string csv = file_text(r, "tv-curve.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "# config_hash=" + hex64(c.hash()) + " seed=42");
  EXPECT_EQ(csv.substr(csv.find('\n') + 1, 10), "t,tv,bound");
}

TEST(EntropyCurve, NoViolations) {
  const Report r = run_experiment_report(config_of(
      "experiment=entropy-curve\nn=4\nnorm=0.4\nmodel_gen=random\ninit=random 5\nt_grid=0:30\ndynamics=glauber\n"));
  ASSERT_EQ(r.exit_code, kExitOk) << r.summary.dump();
  EXPECT_EQ(r.summary["violations"].get<int>(), 0);
  EXPECT_EQ(rows(file_text(r, "entropy-curve.csv")).size(), 31U);
}

TEST(Extinction, ZeroCouplingWithinBounds) {
  for (const char *kind : {"extinction", "coupon"}) {
    const Report r = run_experiment_report(config_of(std::string("experiment=") + kind +
                                                     "\nn=6\nmodel_gen=zero\ntrials=4000\nt_grid=0:30\nseed=3\n"));
    ASSERT_EQ(r.exit_code, kExitOk) << r.summary.dump();
    EXPECT_EQ(r.summary["points_above_bound"].get<int>(), 0) << kind;
    EXPECT_EQ(rows(file_text(r, std::string(kind) + ".csv")).size(), 31U);
  }
}

TEST(BranchingTail, WritesTailAndMoments) {
  const Report r = run_experiment_report(
      config_of("experiment=branching-tail\nn=12\nmodel_gen=rho0\nrho0=0.05\ntrials=5000\nt_grid=1,3,5\nseed=8\n"));
  ASSERT_EQ(r.exit_code, kExitOk) << r.summary.dump();
  EXPECT_NEAR(r.summary["rho0"].get<double>(), 0.05, 1e-12);
  EXPECT_EQ(rows(file_text(r, "branching-tail.csv")).size(), 6U);
  const auto m = rows(file_text(r, "branching_moment.csv"));
  ASSERT_EQ(m.size(), 3U);
  // N(1) = 1 exactly, so the moment is 2^0.8
  EXPECT_NEAR(std::stod(m[0][4]), std::pow(2.0, 0.8), 1e-12);
}

TEST(KacCompare, ConservesAndTracksEvolution) {
  const Report r = run_experiment_report(config_of("experiment=kac-compare\nn=4\nnorm=0.2\nmodel_gen=random\n"
                                                   "init=product 0.2 0.4 0.6 0.8\npopulation=20000\nt_grid=0:4\n"
                                                   "samples=2000\ndynamics=glauber\nseed=9\n"));
  ASSERT_EQ(r.exit_code, kExitOk) << r.summary.dump();
  EXPECT_EQ(r.summary["max_count_drift"].get<int>(), 0);
  EXPECT_LT(r.summary["final_tv"].get<double>(), 0.05);
  EXPECT_LT(r.summary["sample_tv"].get<double>(), 0.1);
  EXPECT_TRUE(r.summary.contains("mean_resolved_nodes"));
  EXPECT_TRUE(has_file(r, "population.csv"));
  std::istringstream hex(file_text(r, "samples.hex"));
  std::string line;
  int lines = 0;
  while (std::getline(hex, line)) {
    EXPECT_EQ(line.substr(0, 2), "0x");
    ++lines;
  }
  EXPECT_EQ(lines, 2000);
}

TEST(FieldInfer, RecoversFields) {
  const Report r = run_experiment_report(
      config_of("experiment=field-infer\nn=6\nnorm=0.2\nmodel_gen=random\ntrials=5\nseed=10\n"));
  ASSERT_EQ(r.exit_code, kExitOk) << r.summary.dump();
  EXPECT_LE(r.summary["max_abs_error"].get<double>(), 1e-6);
  EXPECT_EQ(rows(file_text(r, "field-infer.csv")).size(), 30U);
}

TEST(KernelAudit, ThreeSitesClean) {
  const Report r = run_experiment_report(
      config_of("experiment=kernel-audit\nn=3\nnorm=0.5\nmodel_gen=random\ntrials=5\nseed=11\n"));
  ASSERT_EQ(r.exit_code, kExitOk) << r.summary.dump();
  EXPECT_LE(r.summary["max_residual"].get<double>(), 1e-12);
  EXPECT_TRUE(r.summary["passed"].get<bool>());
}

TEST(ExitCodes, CapExceededKeepsPartialOutput) {
  const Report r = run_experiment_report(config_of("experiment=kac-compare\nn=3\nnorm=0.2\npopulation=100\n"
                                                   "t_grid=0:6\nsamples=10\ncap_tree_depth=4\n"));
  EXPECT_EQ(r.exit_code, kExitCapExceeded);
  EXPECT_EQ(r.summary["status"], "cap_exceeded");
  EXPECT_EQ(rows(file_text(r, "kac-compare.csv")).size(), 7U);
  EXPECT_FALSE(has_file(r, "samples.hex"));
  EXPECT_EQ(run_experiment_report(config_of("experiment=tv-curve\nn=8\ncap_dense_block=6\n")).exit_code,
            kExitCapExceeded);
  EXPECT_EQ(run_experiment_report(config_of("experiment=kernel-audit\nn=4\n")).exit_code, kExitCapExceeded);
}

TEST(ExitCodes, NumericalFailureAndBadInputs) {
  const Report r = run_experiment_report(
      config_of("experiment=field-infer\nn=4\nnorm=0.2\ntrials=2\nsolver_iterations=1\n"));
  EXPECT_EQ(r.exit_code, kExitNumericalFailure);
  EXPECT_EQ(r.summary["status"], "numerical_failure");
  EXPECT_EQ(run_experiment_report(config_of("experiment=tv-curve\nn=3\ninit=product 0.5\n")).exit_code,
            kExitInvalidConfig);
  EXPECT_EQ(run_experiment_report(config_of("experiment=extinction\nn=3\ntrials=10\n")).exit_code,
            kExitInvalidConfig);
}

TEST(Determinism, RerunIsByteIdentical) {
  const std::vector<std::string> configs{
      "experiment=tv-curve\nn=5\nnorm=0.2\nmodel_gen=random\ninit=random 3\nt_grid=0:6\nseed=12\n",
      "experiment=extinction\nn=5\nnorm=0.02\ntrials=500\nt_grid=0:20\nseed=13\nthreads=3\n",
      "experiment=kac-compare\nn=4\nnorm=0.2\npopulation=2000\nt_grid=0:3\nsamples=100\nseed=14\n",
      "experiment=branching-tail\nn=8\nmodel_gen=rho0\nrho0=0.05\ntrials=300\nt_grid=2,4\nseed=15\nthreads=2\n",
  };
  for (const auto &text : configs) {
    TempDir a, b;
    auto ca = config_of(text), cb = config_of(text);
    ca.out = a.path().string();
    cb.out = b.path().string();
    ASSERT_EQ(run_experiment(ca), kExitOk) << text;
    ASSERT_EQ(run_experiment(cb), kExitOk) << text;
    std::size_t files = 0;
    for (const auto &entry : fs::directory_iterator(a.path())) {
      ++files;
      EXPECT_EQ(slurp(entry.path()), slurp(b.path() / entry.path().filename())) << entry.path();
    }
    EXPECT_GE(files, 2U);
  }
}

TEST(Determinism, ThreadCountDoesNotChangeResults) {
  const std::string text = "experiment=coupon\nn=4\nnorm=0.05\ntrials=300\nt_grid=0:10\nseed=16\n";
  auto one = config_of(text + "threads=1\n"), four = config_of(text + "threads=4\n");
  EXPECT_EQ(file_text(run_experiment_report(one), "coupon.csv"), file_text(run_experiment_report(four), "coupon.csv"));
}

#ifdef NONLINSPIN_CLI

namespace {

struct CliRun {
  int code;
  std::string summary;
};

CliRun run_cli(const std::string &args, const std::string &env = "") {
  TempDir out;
  const std::string cmd = env + " " + NONLINSPIN_CLI + " " + args + " --out " + out.path().string() + " > " +
                          (out.path() / "stdout.txt").string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), slurp(out.path() / "stdout.txt")};
}

std::uint64_t seed_of(const std::string &summary) { return nlohmann::json::parse(summary)["seed"].get<std::uint64_t>(); }

} // namespace

TEST(Cli, SeedPrecedence) {
  TempDir dir;
  const auto cfg = dir.path() / "kernel.cfg";
  std::ofstream(cfg) << "experiment = kernel-audit\nn = 2\nnorm = 0.3\ntrials = 2\nseed = 5\n";
  const std::string base = "kernel-audit --config " + cfg.string();
  EXPECT_EQ(seed_of(run_cli(base).summary), 5U);
  EXPECT_EQ(seed_of(run_cli(base, "NONLINSPIN_SEED=77").summary), 77U);
  EXPECT_EQ(seed_of(run_cli(base + " --seed 9", "NONLINSPIN_SEED=77").summary), 9U);
  EXPECT_EQ(run_cli(base).code, 0);
}

TEST(Cli, ExitCodes) {
  TempDir dir;
  const auto cfg = dir.path() / "audit.cfg";
  std::ofstream(cfg) << "experiment = kernel-audit\nn = 4\n";
  EXPECT_EQ(run_cli("kernel-audit --config " + cfg.string()).code, kExitCapExceeded);
  EXPECT_EQ(run_cli("tv-curve --config " + cfg.string()).code, kExitInvalidConfig);
  EXPECT_EQ(run_cli("warp --config " + cfg.string()).code, kExitInvalidConfig);
  EXPECT_EQ(run_cli("kernel-audit --config " + (dir.path() / "missing.cfg").string()).code, kExitInvalidConfig);
  EXPECT_EQ(run_cli("kernel-audit").code, kExitInvalidConfig);
  EXPECT_EQ(run_cli("kernel-audit --config " + cfg.string(), "NONLINSPIN_SEED=abc").code, kExitInvalidConfig);
}

#endif
