// nonlinspin <experiment-kind> --config <path> [--seed N] [--out DIR]

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11/CLI11.hpp>

#include "nonlinspin/harness.hpp"

using namespace nonlinspin;

namespace {

// Seed precedence: --seed, then NONLINSPIN_SEED, then the config file.
std::optional<std::uint64_t> seed_override(const CLI::Option *flag, std::uint64_t flag_value) {
  if (flag->count() > 0)
    return flag_value;
  if (const char *env = std::getenv("NONLINSPIN_SEED"); env != nullptr && *env != '\0')
    return detail::parse_u64("NONLINSPIN_SEED", env);
  return std::nullopt;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Run a nonlinspin experiment from a config file."};
  std::string kind_name, config_path, out_dir;
  std::uint64_t seed = 0;
  std::string kinds;
  for (const auto &[kind, name] : experiment_names())
    kinds += (kinds.empty() ? "" : ", ") + name;
  app.add_option("experiment", kind_name, "Experiment kind: " + kinds)->required();
  app.add_option("--config", config_path, "Config file (key = value lines)")->required();
  const CLI::Option *seed_flag = app.add_option("--seed", seed, "Master seed; overrides NONLINSPIN_SEED and the config");
  app.add_option("--out", out_dir, "Output directory; overrides the config");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kExitInvalidConfig;
  }

  ExperimentConfig config;
  try {
    const ExperimentKind kind = parse_experiment_kind(kind_name);
    config = load_config(config_path, seed_override(seed_flag, seed));
    require(config.kind == kind, "config describes '" + to_string(config.kind) + "', not '" + kind_name + "'");
    if (!out_dir.empty())
      config.out = out_dir;
  } catch (const InvalidArgument &e) {
    std::cerr << "nonlinspin: " << e.what() << '\n';
    return kExitInvalidConfig;
  }

  try {
    const Report report = run_experiment_report(config);
    write_report(report, config, config.out);
    if (report.exit_code != kExitOk)
      std::cerr << "nonlinspin: " << report.summary.value("error", std::string{}) << '\n';
    std::cout << report.summary.dump(2) << '\n';
    return report.exit_code;
  } catch (const std::exception &e) {
    std::cerr << "nonlinspin: " << e.what() << '\n';
    return kExitInvalidConfig;
  }
}
