#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lengthlab/pipeline.hpp"

namespace pl = lengthlab::pipeline;

namespace {

std::vector<std::string> split_stages(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string s;
  while (std::getline(ss, s, ','))
    if (!s.empty()) out.push_back(s);
  if (out.empty()) throw lengthlab::ConfigError("--stages: empty stage list");
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Length-correlation experiments for RLHF on a synthetic corpus"};
  app.require_subcommand(1);
  std::string config_path, stages = "gen-data,sft,rm,ppo,analyze", out_path;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen-data", "Generate vocabulary and preference data");
  gen->add_option("--config", config_path, "Experiment config (JSON)")->required();
  gen->add_option("--seed", seed, "Override the config seed");
  gen->add_flag("--force", force, "Rerun even if outputs are up to date");

  auto* pipe = app.add_subcommand("pipeline", "Run pipeline stages in a run directory");
  pipe->add_option("--config", config_path, "Experiment config (JSON)")->required();
  pipe->add_option("--stages", stages, "Comma list from gen-data,sft,rm,ppo,analyze");
  pipe->add_option("--seed", seed, "Override the config seed");
  pipe->add_flag("--force", force, "Rerun even if outputs are up to date");

  auto* cmp = app.add_subcommand("compare", "Compare two analysed runs");
  cmp->add_option("runs", runs, "RUN_A RUN_B (run directories)")->required()->expected(2);
  cmp->add_option("--out", out_path, "Also write the report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (*cmp) {
    const auto report = pl::compare_runs(runs[0], runs[1]);
    std::cout << report;
    if (!out_path.empty()) pl::write_file_atomic(out_path, report);
    return 0;
  }

  auto cfg = pl::load_config(config_path);
  if (seed) cfg.seed = *seed;
  pl::Runner runner(cfg, pl::runs_root(), force);
  runner.run(*gen ? std::vector<std::string>{"gen-data"} : split_stages(stages));
  if (*gen && runner.heuristic_accuracy())
    std::cout << "length-heuristic accuracy: " << pl::fmt(*runner.heuristic_accuracy()) << "\n";
  std::cout << runner.run_dir().string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const lengthlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const lengthlab::ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const lengthlab::DependencyError& e) {
    std::cerr << "error: " << e.what() << " [stage: " << e.stage() << "]\n";
    return 3;
  } catch (const lengthlab::TrainingError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
