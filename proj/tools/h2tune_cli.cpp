// Experiment runner for the federated TriLoRA engine.
//
//   h2tune run --config scenarios/desk.json --out runs/a --baseline H2TUNE --baseline LOCAL
//   h2tune compare runs/a/H2TUNE runs/a/LOCAL
//   h2tune dump-data --config scenarios/desk.json --out data/
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "h2tune/errors.hpp"
#include "h2tune/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Heterogeneous federated fine-tuning with TriLoRA adapters"};
  app.require_subcommand(1);

  h2tune::RunOptions options;
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> baselines;
  std::string transport;
  int rounds = -1;
  std::uint64_t seed = 0;
  bool proximal = false;

  CLI::App* run = app.add_subcommand("run", "run a federation for one or more arms");
  run->add_option("--config", config_path, "experiment JSON")->required();
  run->add_option("--out", out_dir, "output directory (new or empty)")->required();
  CLI::Option* rounds_opt = run->add_option("--rounds", rounds, "override round count");
  CLI::Option* seed_opt = run->add_option("--seed", seed, "override master seed");
  run->add_option("--baseline", baselines, "H2TUNE, LOCAL, NO_DISENTANGLE or NO_MASK (repeatable)");
  run->add_flag("--check-grads", options.check_grads, "verify analytic gradients before training");
  CLI::Option* transport_opt =
      run->add_option("--transport", transport, "inproc or files")->check(CLI::IsMember({"inproc", "files"}));
  CLI::Option* proximal_opt = run->add_flag("--proximal", proximal, "use the proximal final shared step");

  std::vector<std::string> compare_dirs;
  CLI::App* compare = app.add_subcommand("compare", "compare final accuracies of arm directories");
  compare->add_option("dirs", compare_dirs, "arm output directories")->required()->expected(2, -1);

  std::string dump_config;
  std::string dump_out;
  std::uint64_t dump_seed = 0;
  CLI::App* dump = app.add_subcommand("dump-data", "write each client's synthetic data as CSV");
  dump->add_option("--config", dump_config, "experiment JSON")->required();
  dump->add_option("--out", dump_out, "output directory")->required();
  CLI::Option* dump_seed_opt = dump->add_option("--seed", dump_seed, "override master seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : h2tune::kExitParse;
  }

  if (*run) {
    options.config_path = config_path;
    options.out_dir = out_dir;
    if (*rounds_opt) options.rounds = rounds;
    if (*seed_opt) options.seed = seed;
    if (*proximal_opt) options.proximal = proximal;
    if (*transport_opt) {
      options.transport = transport == "files" ? h2tune::Transport::kFileExchange : h2tune::Transport::kInProcess;
    }
    if (!baselines.empty()) {
      options.arms.clear();
      try {
        for (const std::string& b : baselines) options.arms.push_back(h2tune::parse_arm(b));
      } catch (const h2tune::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return h2tune::kExitParse;
      }
    }
    return h2tune::run_experiment(options, std::cout, std::cerr);
  }
  if (*compare) {
    std::vector<std::filesystem::path> dirs(compare_dirs.begin(), compare_dirs.end());
    return h2tune::compare_arms(dirs, std::cout, std::cerr);
  }
  if (*dump) {
    std::optional<std::uint64_t> s;
    if (*dump_seed_opt) s = dump_seed;
    return h2tune::dump_data(dump_config, s, dump_out, std::cerr);
  }
  return h2tune::kExitParse;
}
