// pfsim: run the P_f pipeline stages from a JSON config.
//
//   pfsim <verb> --config study.json [--seed N] [--jobs N] [--setting A|B]
//
// Exit codes: 0 success, 2 configuration or data error, 3 numerical failure.

#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "pfsim/pipeline.hpp"

namespace {

int run(const std::string& verb, const std::string& config_path, std::optional<std::uint64_t> seed,
        std::optional<unsigned> jobs, std::optional<std::string> setting) {
  using namespace pfsim::pipeline;
  PipelineConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (jobs) {
    if (*jobs == 0) throw pfsim::ConfigError("--jobs must be at least 1");
    cfg.jobs = *jobs;
  }
  if (setting) cfg.setting = setting_from_string(*setting);
  cfg.master_seed();  // no wall-clock fallback

  Pipeline p(cfg, std::cout);
  static const std::map<std::string, Stage> stages{{"fit-inputs", Stage::FitInputs}, {"tune-lambda", Stage::TuneLambda},
                                                   {"fit-gp", Stage::FitGp},         {"tune-prior", Stage::TunePrior},
                                                   {"simulate-pf", Stage::SimulatePf}, {"report", Stage::Report}};
  if (verb == "synth") {
    p.synth();
  } else if (verb == "all") {
    p.run_all();
  } else {
    p.run(stages.at(verb));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Posterior of a rare-event exceedance probability from a GP surrogate"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
  std::optional<std::string> setting;

  const std::map<std::string, std::string> verbs{
      {"fit-inputs", "Posterior chains for the input distribution parameters"},
      {"tune-lambda", "Leave-one-out CV over the REML penalty"},
      {"fit-gp", "Penalized REML fit of the range parameters"},
      {"tune-prior", "Leave-one-out CV over the theta prior, then the final theta chain"},
      {"simulate-pf", "Nested simulation of the exceedance probability"},
      {"report", "Plot-ready CSV and JSON summaries"},
      {"synth", "Write the synthetic study dataset"},
      {"all", "Run every stage in order"}};
  for (const auto& [name, help] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Master seed (overrides the config)");
    sub->add_option("--jobs", jobs, "Worker thread cap");
    sub->add_option("--setting", setting, "A: fixed REML theta; B: theta posterior")->check(CLI::IsMember({"A", "B"}));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    return run(verb, config_path, seed, jobs, setting);
  } catch (const pfsim::ConfigError& e) {
    std::cerr << "pfsim " << verb << ": " << e.what() << '\n';
    return 2;
  } catch (const pfsim::NumericalError& e) {
    std::cerr << "pfsim " << verb << ": numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "pfsim " << verb << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "pfsim " << verb << ": " << e.what() << '\n';
    return 1;
  }
}
