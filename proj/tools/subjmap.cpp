// subjmap <simulate|train|sweep|finetune|evaluate|analyze|paramcount> --config <path>
//         [--out <dir>] [--seed <u64>] [--workers <n>]
//
// Exit status: 0 success, 1 configuration error, 2 runtime error.

#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "subjmap/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Subject-specific manifold learning experiments"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());

  for (auto name : subjmap::kCommands) {
    auto* sub = app.add_subcommand(std::string(name));
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out, "output directory (overrides SUBJMAP_OUT and the config)");
    sub->add_option("--seed", seed, "global seed (overrides the config)");
    sub->add_option("--workers", workers, "sweep worker threads")->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    subjmap::ExperimentConfig cfg = subjmap::load_experiment_config(config_path);
    if (seed) cfg.seed = *seed;
    subjmap::RunOptions opt;
    opt.output_dir = subjmap::resolve_output_dir(cfg, out);
    opt.workers = workers;
    opt.log = &std::cout;
    const auto result = subjmap::run_experiment(command, cfg, opt);
    std::cout << "wrote " << (opt.output_dir / "results.json").string() << " (config " << result.config_hash.substr(0, 12)
              << ")\n";
    return 0;
  } catch (const subjmap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
