// Command-line driver for the purification lab.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "pfl/experiment.hpp"
#include "pfl/verify.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based adversarial purification lab for speaker verification"};
  app.require_subcommand(1);
  std::string config_path, out;
  std::vector<std::string> sets;
  long long seed = -1;
  app.add_option("--config", config_path, "JSON config file (defaults are embedded)");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out, "run directory");
  app.add_option("--set", sets, "override a config key, e.g. --set dap.t_star=3")->take_all();
  bool quiet = false;
  app.add_flag("--quiet", quiet, "suppress progress messages");

  struct Stage {
    const char* name;
    const char* help;
    void (*run)(const pfl::Experiment&);
  };
  const Stage stages[] = {
      {"synth-data", "synthesize the speaker corpus and trial list", pfl::stage_synth_data},
      {"train-asv", "train the victim speaker encoder", pfl::stage_train_asv},
      {"train-dap", "train the diffusion purifier", pfl::stage_train_dap},
      {"attack", "craft adversarial and matched-noise test audio", pfl::stage_attack},
      {"defend", "purify test audio with DAP", pfl::stage_defend},
      {"evaluate", "score every (condition, defense) cell", pfl::stage_evaluate},
      {"report", "write report, table and summary files", pfl::stage_report},
      {"all", "run every stage in order", pfl::run_all},
  };
  for (const auto& s : stages) app.add_subcommand(s.name, s.help);
  auto* verify = app.add_subcommand("verify", "run the property checks");
  auto* dump = app.add_subcommand("dump-config", "print the resolved config");

  CLI11_PARSE(app, argc, argv);

  try {
    if (seed >= 0) sets.push_back("seed=" + std::to_string(seed));
    if (!out.empty()) sets.push_back("out=\"" + out + "\"");
    auto cfg = pfl::load_config(config_path, sets);
    if (dump->parsed()) {
      std::cout << cfg.dump(2) << '\n';
      return 0;
    }
    pfl::Experiment ex(cfg);
    if (quiet) ex.log = nullptr;
    if (verify->parsed()) {
      bool ok = true;
      for (const auto& r : pfl::run_verify(ex.s.schedule, ex.s.seed)) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
        ok = ok && r.pass;
      }
      return ok ? 0 : 1;
    }
    for (const auto& s : stages)
      if (app.got_subcommand(s.name)) s.run(ex);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
